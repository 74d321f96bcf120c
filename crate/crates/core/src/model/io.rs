//! `NNIR` model files: magic, u16 version, u32-length manifest text,
//! u64-length little-endian f32 parameter blob, CRC32 of everything before it.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use super::{LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::format::{check_frame, put_f32s, seal, Cursor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NNIR";
pub const VERSION: u16 = 1;

fn layer_line(layer: &LayerSpec) -> String {
    let kind = layer.kind();
    match *layer {
        LayerSpec::Conv2D { filters, kernel, stride, padding } => {
            format!("{kind} filters={filters} kernel={kernel} stride={stride} padding={padding}")
        }
        LayerSpec::Dense { units } | LayerSpec::DecoderDense { units } => format!("{kind} units={units}"),
        LayerSpec::AvgPool { window, stride } | LayerSpec::MaxPool { window, stride } => {
            format!("{kind} window={window} stride={stride}")
        }
        LayerSpec::ZeroPad { amount } => format!("{kind} amount={amount}"),
        LayerSpec::Dropout { rate } => format!("{kind} rate={}", rate.to_bits()),
        LayerSpec::BatchNorm { eps } => format!("{kind} eps={}", eps.to_bits()),
        LayerSpec::Add { source } => format!("{kind} source={source}"),
        LayerSpec::PrimaryCaps { channels, caps_dim, kernel, stride } => {
            format!("{kind} channels={channels} caps_dim={caps_dim} kernel={kernel} stride={stride}")
        }
        LayerSpec::ClassCaps { num_caps, caps_dim, routing_iters } => {
            format!("{kind} num_caps={num_caps} caps_dim={caps_dim} routing_iters={routing_iters}")
        }
        LayerSpec::Flatten | LayerSpec::ReLU | LayerSpec::Softmax => kind.to_string(),
    }
}

fn parse_layer(line: &str) -> Result<LayerSpec> {
    let mut words = line.split_whitespace();
    let kind = words.next().ok_or_else(|| Error::Format("empty layer line".into()))?;
    let fields: Vec<(&str, &str)> = words
        .map(|w| w.split_once('=').ok_or_else(|| Error::Format(format!("bad layer field {w:?}"))))
        .collect::<Result<_>>()?;
    let get = |key: &str| -> Result<usize> {
        let (_, v) = fields
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| Error::Format(format!("layer {kind} lacks {key}")))?;
        v.parse().map_err(|_| Error::Format(format!("layer {kind}: bad {key} {v:?}")))
    };
    let bits = |key: &str| -> Result<f32> {
        let (_, v) = fields
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| Error::Format(format!("layer {kind} lacks {key}")))?;
        v.parse::<u32>().map(f32::from_bits).map_err(|_| Error::Format(format!("layer {kind}: bad {key} {v:?}")))
    };
    Ok(match kind {
        "conv2d" => LayerSpec::Conv2D { filters: get("filters")?, kernel: get("kernel")?, stride: get("stride")?, padding: get("padding")? },
        "dense" => LayerSpec::Dense { units: get("units")? },
        "decoderdense" => LayerSpec::DecoderDense { units: get("units")? },
        "avgpool" => LayerSpec::AvgPool { window: get("window")?, stride: get("stride")? },
        "maxpool" => LayerSpec::MaxPool { window: get("window")?, stride: get("stride")? },
        "flatten" => LayerSpec::Flatten,
        "zeropad" => LayerSpec::ZeroPad { amount: get("amount")? },
        "relu" => LayerSpec::ReLU,
        "softmax" => LayerSpec::Softmax,
        "dropout" => LayerSpec::Dropout { rate: bits("rate")? },
        "batchnorm" => LayerSpec::BatchNorm { eps: bits("eps")? },
        "add" => LayerSpec::Add { source: get("source")? },
        "primarycaps" => LayerSpec::PrimaryCaps {
            channels: get("channels")?,
            caps_dim: get("caps_dim")?,
            kernel: get("kernel")?,
            stride: get("stride")?,
        },
        "classcaps" => LayerSpec::ClassCaps {
            num_caps: get("num_caps")?,
            caps_dim: get("caps_dim")?,
            routing_iters: get("routing_iters")?,
        },
        other => return Err(Error::Version(format!("unknown layer kind {other:?}"))),
    })
}

fn manifest(model: &ModelGraph) -> String {
    let mut m = String::new();
    let [c, h, w] = model.input_shape();
    let _ = writeln!(m, "input {c} {h} {w}");
    let _ = writeln!(m, "classes {}", model.class_count());
    for layer in model.layers() {
        let _ = writeln!(m, "layer {}", layer_line(layer));
    }
    for p in model.params() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(m, "param {} {}", p.name, dims.join(","));
    }
    m
}

/// Serializes `model` into the `NNIR` byte layout.
pub fn write_model<W: Write>(model: &ModelGraph, mut out: W) -> Result<()> {
    let text = manifest(model);
    let mut buf = Vec::with_capacity(text.len() + 4 * model.param_count() + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(text.len()).map_err(|_| Error::Format("manifest too large".into()))?.to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(4 * model.param_count() as u64).to_le_bytes());
    for p in model.params() {
        put_f32s(&mut buf, p.value.data());
    }
    seal(&mut buf);
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_model<R: Read>(mut input: R) -> Result<ModelGraph> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let body = check_frame(&bytes, MAGIC, "NNIR", VERSION)?;
    let mut cur = Cursor::new(body);
    let text_len = cur.u32()? as usize;
    let text = std::str::from_utf8(cur.bytes(text_len)?).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let blob_len = cur.u64()? as usize;
    let blob = cur.bytes(blob_len)?;
    cur.finish()?;

    let mut input_shape = None;
    let mut classes = None;
    let mut layers = Vec::new();
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    for line in text.lines() {
        let (key, rest) = line.split_once(' ').ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
        match key {
            "input" => {
                let d: Vec<usize> = rest.split(' ').map(|v| v.parse()).collect::<std::result::Result<_, _>>().map_err(|_| Error::Format("bad input shape".into()))?;
                let [c, h, w] = d[..] else { return Err(Error::Format("input shape needs three dims".into())) };
                input_shape = Some([c, h, w]);
            }
            "classes" => classes = Some(rest.parse().map_err(|_| Error::Format("bad class count".into()))?),
            "layer" => layers.push(parse_layer(rest)?),
            "param" => {
                let (name, dims) = rest.split_once(' ').ok_or_else(|| Error::Format(format!("bad param line {line:?}")))?;
                let dims = dims.split(',').map(|v| v.parse()).collect::<std::result::Result<_, _>>().map_err(|_| Error::Format(format!("bad shape for {name}")))?;
                shapes.push((name.to_string(), dims));
            }
            other => return Err(Error::Version(format!("unknown manifest entry {other:?}"))),
        }
    }
    let input_shape = input_shape.ok_or_else(|| Error::Format("manifest lacks input shape".into()))?;
    let classes = classes.ok_or_else(|| Error::Format("manifest lacks class count".into()))?;

    let total: usize = shapes.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
    if total * 4 != blob.len() {
        return Err(Error::Format(format!("parameter blob holds {} bytes, manifest needs {}", blob.len(), total * 4)));
    }
    let mut floats = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let named = shapes
        .into_iter()
        .map(|(name, dims)| {
            let n = dims.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            Ok((name, Tensor::new(dims, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelGraph::from_params(input_shape, classes, layers, named)
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_model(model, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    read_model(std::fs::File::open(path)?)
}
