//! Compiled spiking networks and the `SNNC` file format.
//!
//! Layout: magic, u16 version, u32 C, H, W, u8 encoding, u32 class count,
//! u32 layer count, then per layer u32 inputs, u32 outputs, f32 threshold,
//! u32 source layer; then every layer's `[out, in]` weights followed by its
//! bias, all little-endian f32; CRC32 trailer.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{check_frame, put_f32s, seal, Cursor};

pub const MAGIC: &[u8; 4] = b"SNNC";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Encoding {
    Poisson,
    ConstantCurrent,
}

impl Encoding {
    fn tag(self) -> u8 {
        match self {
            Encoding::Poisson => 0,
            Encoding::ConstantCurrent => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Encoding::Poisson),
            1 => Ok(Encoding::ConstantCurrent),
            t => Err(Error::Version(format!("unknown input encoding tag {t}"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "poisson" => Ok(Encoding::Poisson),
            "constant" | "constant_current" | "constant-current" => Ok(Encoding::ConstantCurrent),
            other => Err(Error::contract(format!("unknown encoder {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Encoding::Poisson => "poisson",
            Encoding::ConstantCurrent => "constant_current",
        }
    }
}

/// Column-compressed copy of a weight matrix for spike-driven accumulation.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Csc {
    pub col_start: Vec<u32>,
    pub rows: Vec<u32>,
    pub values: Vec<f32>,
}

impl Csc {
    fn from_dense(weights: &[f32], outputs: usize, inputs: usize) -> Self {
        let mut col_start = Vec::with_capacity(inputs + 1);
        let mut rows = Vec::new();
        let mut values = Vec::new();
        col_start.push(0);
        for i in 0..inputs {
            for o in 0..outputs {
                let w = weights[o * inputs + i];
                if w != 0.0 {
                    rows.push(o as u32);
                    values.push(w);
                }
            }
            col_start.push(rows.len() as u32);
        }
        Csc { col_start, rows, values }
    }

    /// `acc[o] += W[o, i]` for every spiking input `i`.
    #[inline]
    pub fn add_column(&self, i: usize, acc: &mut [f32]) {
        let (a, b) = (self.col_start[i] as usize, self.col_start[i + 1] as usize);
        for (&r, &v) in self.rows[a..b].iter().zip(&self.values[a..b]) {
            acc[r as usize] += v;
        }
    }
}

/// One integrate-and-fire population with soft reset.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikingLayer {
    inputs: usize,
    outputs: usize,
    threshold: f32,
    source_layer: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    pub(crate) csc: Csc,
}

impl SpikingLayer {
    /// `weights` is `[outputs, inputs]` row-major; `bias` is the constant
    /// current injected every step.
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f32>, bias: Vec<f32>, threshold: f32, source_layer: usize) -> Result<Self> {
        if inputs == 0 || outputs == 0 || weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::dim(format!(
                "layer {inputs}->{outputs} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if !(threshold > 0.0) || !threshold.is_finite() {
            return Err(Error::contract(format!("threshold must be positive, got {threshold}")));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric { step: 0, message: "non-finite spiking weights".into() });
        }
        let csc = Csc::from_dense(&weights, outputs, inputs);
        Ok(SpikingLayer { inputs, outputs, threshold, source_layer, weights, bias, csc })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    /// Index of the source-model layer whose activations this population encodes.
    pub fn source_layer(&self) -> usize {
        self.source_layer
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn nonzeros(&self) -> usize {
        self.csc.values.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikingNetwork {
    input_shape: [usize; 3],
    encoding: Encoding,
    class_count: usize,
    layers: Vec<SpikingLayer>,
}

impl SpikingNetwork {
    pub fn new(input_shape: [usize; 3], encoding: Encoding, class_count: usize, layers: Vec<SpikingLayer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::contract("a spiking network needs a layer"))?;
        let pixels: usize = input_shape.iter().product();
        if first.inputs != pixels {
            return Err(Error::dim(format!("first layer takes {} inputs, images have {pixels}", first.inputs)));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::dim(format!(
                    "layer {i} emits {} spikes but layer {} takes {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        let last = layers.last().expect("nonempty");
        if last.outputs != class_count {
            return Err(Error::dim(format!("output layer has {} neurons for {class_count} classes", last.outputs)));
        }
        Ok(SpikingNetwork { input_shape, encoding, class_count, layers })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn with_encoding(mut self, encoding: Encoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[SpikingLayer] {
        &self.layers
    }

    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(|l| l.outputs).sum()
    }
}

pub fn write_snn<W: Write>(net: &SpikingNetwork, mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for d in net.input_shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(net.encoding.tag());
    buf.extend_from_slice(&(net.class_count as u32).to_le_bytes());
    buf.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        buf.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        buf.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        buf.extend_from_slice(&l.threshold.to_le_bytes());
        buf.extend_from_slice(&(l.source_layer as u32).to_le_bytes());
    }
    for l in &net.layers {
        put_f32s(&mut buf, &l.weights);
        put_f32s(&mut buf, &l.bias);
    }
    seal(&mut buf);
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_snn<R: Read>(mut input: R) -> Result<SpikingNetwork> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let body = check_frame(&bytes, MAGIC, "SNNC", VERSION)?;
    let mut cur = Cursor::new(body);
    let shape = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
    let encoding = Encoding::from_tag(cur.u8()?)?;
    let classes = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        table.push((cur.u32()? as usize, cur.u32()? as usize, cur.f32()?, cur.u32()? as usize));
    }
    let mut layers = Vec::with_capacity(table.len());
    for (inputs, outputs, theta, source) in table {
        let n = inputs.checked_mul(outputs).ok_or_else(|| Error::Format("layer size overflow".into()))?;
        let weights = cur.f32s(n)?;
        let bias = cur.f32s(outputs)?;
        layers.push(SpikingLayer::new(inputs, outputs, weights, bias, theta, source)?);
    }
    cur.finish()?;
    SpikingNetwork::new(shape, encoding, classes, layers)
}

pub fn save_snn(net: &SpikingNetwork, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_snn(net, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_snn(path: impl AsRef<Path>) -> Result<SpikingNetwork> {
    read_snn(std::fs::File::open(path)?)
}
