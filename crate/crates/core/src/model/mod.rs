//! Layer-graph model representation.
//!
//! A [`ModelGraph`] is an ordered list of [`LayerSpec`]s plus the named
//! parameter tensors they own. Shapes are chain-checked when the graph is
//! built, so executing a constructed graph never fails on dimensions.

mod exec;
pub mod io;
pub mod schedule;
pub mod train;
pub mod transfer;
pub mod zoo;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::Tensor;

pub use exec::{DecodeTarget, Recorded};
pub(crate) use exec::{dropout_rng, ExecOptions};
pub use io::{load_model, read_model, save_model, write_model};
pub use schedule::{lr_at, LRSchedule};
pub use train::{train, train_with_validation, EpochRecord, History, LossKind, LrGroup, Optimizer, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2D { filters: usize, kernel: usize, stride: usize, padding: usize },
    Dense { units: usize },
    AvgPool { window: usize, stride: usize },
    MaxPool { window: usize, stride: usize },
    Flatten,
    ZeroPad { amount: usize },
    ReLU,
    Softmax,
    /// Inverted dropout, active only while training.
    Dropout { rate: f32 },
    /// Per-channel normalization with stored statistics; `gamma`, `beta`,
    /// `mean` and `var` live in the parameter table.
    BatchNorm { eps: f32 },
    /// Elementwise sum of the previous layer's output and the output of layer `source`.
    Add { source: usize },
    PrimaryCaps { channels: usize, caps_dim: usize, kernel: usize, stride: usize },
    ClassCaps { num_caps: usize, caps_dim: usize, routing_iters: usize },
    /// Reconstruction head fed by the masked class capsules. Hidden decoder
    /// layers use ReLU, the last one a sigmoid.
    DecoderDense { units: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ZeroPad { .. } => "zeropad",
            LayerSpec::ReLU => "relu",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Add { .. } => "add",
            LayerSpec::PrimaryCaps { .. } => "primarycaps",
            LayerSpec::ClassCaps { .. } => "classcaps",
            LayerSpec::DecoderDense { .. } => "decoderdense",
        }
    }

    pub fn is_decoder(&self) -> bool {
        matches!(self, LayerSpec::DecoderDense { .. })
    }
}

/// Activation shape flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
    Caps { n: usize, dim: usize },
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Map { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
            ActShape::Caps { n, dim } => n * dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Map { c, h, w } => vec![c, h, w],
            ActShape::Flat(n) => vec![n],
            ActShape::Caps { n, dim } => vec![n, dim],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    Mean,
    Var,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::Mean => "mean",
            ParamRole::Var => "var",
        }
    }

    fn trainable(self) -> bool {
        !matches!(self, ParamRole::Mean | ParamRole::Var)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub value: Tensor,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.role.trainable()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    HeUniform { fan_in: usize },
    Uniform { limit: f32 },
    Zeros,
    Ones,
}

struct ParamSpec {
    role: ParamRole,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    input_shape: [usize; 3],
    class_count: usize,
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
    shapes: Vec<ActShape>,
    layer_params: Vec<Vec<usize>>,
}

fn param_name(layer: usize, spec: &LayerSpec, role: ParamRole) -> String {
    format!("{layer}.{}.{}", spec.kind(), role.as_str())
}

fn infer_shape(idx: usize, layer: &LayerSpec, input: ActShape, earlier: &[ActShape]) -> Result<ActShape> {
    let err = |msg: String| Error::dim(format!("layer {idx} ({}): {msg}", layer.kind()));
    let map = |s: ActShape| match s {
        ActShape::Map { c, h, w } => Ok((c, h, w)),
        other => Err(err(format!("needs a [C, H, W] input, got {:?}", other.dims()))),
    };
    Ok(match *layer {
        LayerSpec::Conv2D { filters, kernel, stride, padding } => {
            let g = ConvGeom::new(map(input)?, (kernel, kernel), stride, padding).map_err(|e| err(e.to_string()))?;
            if filters == 0 {
                return Err(err("zero filters".into()));
            }
            ActShape::Map { c: filters, h: g.oh, w: g.ow }
        }
        LayerSpec::Dense { units } => match input {
            ActShape::Flat(_) if units > 0 => ActShape::Flat(units),
            ActShape::Flat(_) => return Err(err("zero units".into())),
            other => return Err(err(format!("needs a flat input (insert Flatten), got {:?}", other.dims()))),
        },
        LayerSpec::AvgPool { window, stride } | LayerSpec::MaxPool { window, stride } => {
            let (c, h, w) = map(input)?;
            if window == 0 || window > h || window > w {
                return Err(err(format!("window {window} larger than {h}x{w}")));
            }
            let g = ConvGeom::new((c, h, w), (window, window), stride, 0).map_err(|e| err(e.to_string()))?;
            ActShape::Map { c, h: g.oh, w: g.ow }
        }
        LayerSpec::Flatten => ActShape::Flat(input.len()),
        LayerSpec::ZeroPad { amount } => {
            let (c, h, w) = map(input)?;
            ActShape::Map { c, h: h + 2 * amount, w: w + 2 * amount }
        }
        LayerSpec::ReLU | LayerSpec::Softmax => input,
        LayerSpec::Dropout { rate } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::contract(format!("layer {idx}: dropout rate {rate} outside [0, 1)")));
            }
            input
        }
        LayerSpec::BatchNorm { eps } => {
            if !(eps >= 0.0) {
                return Err(err(format!("invalid eps {eps}")));
            }
            match input {
                ActShape::Caps { .. } => return Err(err("cannot normalize capsules".into())),
                other => other,
            }
        }
        LayerSpec::Add { source } => {
            if source >= idx {
                return Err(err(format!("skip source {source} must be an earlier layer")));
            }
            if earlier[source] != input {
                return Err(err(format!(
                    "skip source {source} has shape {:?}, main path {:?}",
                    earlier[source].dims(),
                    input.dims()
                )));
            }
            input
        }
        LayerSpec::PrimaryCaps { channels, caps_dim, kernel, stride } => {
            if channels == 0 || caps_dim == 0 {
                return Err(err("empty capsule layer".into()));
            }
            let g = ConvGeom::new(map(input)?, (kernel, kernel), stride, 0).map_err(|e| err(e.to_string()))?;
            ActShape::Caps { n: channels * g.oh * g.ow, dim: caps_dim }
        }
        LayerSpec::ClassCaps { num_caps, caps_dim, routing_iters } => {
            if routing_iters == 0 {
                return Err(Error::contract(format!("layer {idx}: routing needs at least one iteration")));
            }
            match input {
                ActShape::Caps { .. } if num_caps > 0 && caps_dim > 0 => ActShape::Caps { n: num_caps, dim: caps_dim },
                ActShape::Caps { .. } => return Err(err("empty capsule layer".into())),
                other => return Err(err(format!("needs capsule input, got {:?}", other.dims()))),
            }
        }
        LayerSpec::DecoderDense { units } => {
            if units == 0 {
                return Err(err("zero units".into()));
            }
            ActShape::Flat(units)
        }
    })
}

fn param_specs(layer: &LayerSpec, input: ActShape) -> Vec<ParamSpec> {
    let weight = |shape: Vec<usize>, fan_in: usize| ParamSpec { role: ParamRole::Weight, shape, init: Init::HeUniform { fan_in } };
    let bias = |n: usize| ParamSpec { role: ParamRole::Bias, shape: vec![n], init: Init::Zeros };
    match *layer {
        LayerSpec::Conv2D { filters, kernel, .. } => {
            let cin = input.dims()[0];
            vec![weight(vec![filters, cin, kernel, kernel], cin * kernel * kernel), bias(filters)]
        }
        LayerSpec::Dense { units } | LayerSpec::DecoderDense { units } => {
            let n = input.len();
            vec![weight(vec![units, n], n), bias(units)]
        }
        LayerSpec::PrimaryCaps { channels, caps_dim, kernel, .. } => {
            let cin = input.dims()[0];
            let filters = channels * caps_dim;
            vec![weight(vec![filters, cin, kernel, kernel], cin * kernel * kernel), bias(filters)]
        }
        LayerSpec::ClassCaps { num_caps, caps_dim, .. } => {
            let ActShape::Caps { n, dim } = input else { unreachable!("checked by infer_shape") };
            // Keeps the initial routed sums near unit norm for ~1k input capsules.
            let limit = (6.0 / (dim * n) as f32).sqrt();
            vec![ParamSpec { role: ParamRole::Weight, shape: vec![n, num_caps, caps_dim, dim], init: Init::Uniform { limit } }]
        }
        LayerSpec::BatchNorm { .. } => {
            let c = input.dims()[0];
            vec![
                ParamSpec { role: ParamRole::Gamma, shape: vec![c], init: Init::Ones },
                ParamSpec { role: ParamRole::Beta, shape: vec![c], init: Init::Zeros },
                ParamSpec { role: ParamRole::Mean, shape: vec![c], init: Init::Zeros },
                ParamSpec { role: ParamRole::Var, shape: vec![c], init: Init::Ones },
            ]
        }
        _ => Vec::new(),
    }
}

fn init_tensor(shape: Vec<usize>, init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![0.0; len],
        Init::Ones => vec![1.0; len],
        Init::HeUniform { fan_in } => {
            let limit = (6.0 / fan_in as f64).sqrt() as f32;
            (0..len).map(|_| rng.random_range(-limit..limit)).collect()
        }
        Init::Uniform { limit } => (0..len).map(|_| rng.random_range(-limit..limit)).collect(),
    };
    Tensor::from_parts(shape, data)
}

impl ModelGraph {
    /// Builds a graph and initializes its parameters from `seed`.
    pub fn new(input_shape: [usize; 3], class_count: usize, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let shapes = Self::check(input_shape, class_count, &layers)?;
        let mut params = Vec::new();
        let mut layer_params = Vec::with_capacity(layers.len());
        for (idx, layer) in layers.iter().enumerate() {
            let input = if idx == 0 { input_map(input_shape) } else { shapes[idx - 1] };
            let mut ids = Vec::new();
            for spec in param_specs(layer, input) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(params.len() as u64);
                ids.push(params.len());
                params.push(Param {
                    name: param_name(idx, layer, spec.role),
                    layer: idx,
                    role: spec.role,
                    value: init_tensor(spec.shape, spec.init, &mut rng),
                });
            }
            layer_params.push(ids);
        }
        Ok(ModelGraph { input_shape, class_count, layers, params, shapes, layer_params })
    }

    /// Rebuilds a graph from explicit parameter tensors, checking that names
    /// and shapes are exactly those the layer list requires.
    pub fn from_params(
        input_shape: [usize; 3],
        class_count: usize,
        layers: Vec<LayerSpec>,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let shapes = Self::check(input_shape, class_count, &layers)?;
        let mut given = named.into_iter();
        let mut params = Vec::new();
        let mut layer_params = Vec::with_capacity(layers.len());
        for (idx, layer) in layers.iter().enumerate() {
            let input = if idx == 0 { input_map(input_shape) } else { shapes[idx - 1] };
            let mut ids = Vec::new();
            for spec in param_specs(layer, input) {
                let expected = param_name(idx, layer, spec.role);
                let (name, value) = given
                    .next()
                    .ok_or_else(|| Error::Format(format!("missing parameter {expected}")))?;
                if name != expected {
                    return Err(Error::Format(format!("parameter {name} found where {expected} was expected")));
                }
                if value.shape() != spec.shape.as_slice() {
                    return Err(Error::dim(format!("parameter {name} has shape {:?}, expected {:?}", value.shape(), spec.shape)));
                }
                ids.push(params.len());
                params.push(Param { name, layer: idx, role: spec.role, value });
            }
            layer_params.push(ids);
        }
        if let Some((name, _)) = given.next() {
            return Err(Error::Format(format!("unexpected parameter {name}")));
        }
        Ok(ModelGraph { input_shape, class_count, layers, params, shapes, layer_params })
    }

    /// Like [`ModelGraph::from_params`] with the names generated: `values[i]`
    /// holds layer `i`'s tensors in role order.
    pub fn from_layer_params(
        input_shape: [usize; 3],
        class_count: usize,
        layers: Vec<LayerSpec>,
        values: Vec<Vec<Tensor>>,
    ) -> Result<Self> {
        if values.len() != layers.len() {
            return Err(Error::contract(format!("{} layers but {} parameter lists", layers.len(), values.len())));
        }
        let shapes = Self::check(input_shape, class_count, &layers)?;
        let mut named = Vec::new();
        for (idx, (layer, tensors)) in layers.iter().zip(values).enumerate() {
            let input = if idx == 0 { input_map(input_shape) } else { shapes[idx - 1] };
            let specs = param_specs(layer, input);
            if specs.len() != tensors.len() {
                return Err(Error::contract(format!(
                    "layer {idx} ({}) needs {} parameters, got {}",
                    layer.kind(),
                    specs.len(),
                    tensors.len()
                )));
            }
            for (spec, t) in specs.iter().zip(tensors) {
                named.push((param_name(idx, layer, spec.role), t));
            }
        }
        Self::from_params(input_shape, class_count, layers, named)
    }

    fn check(input_shape: [usize; 3], class_count: usize, layers: &[LayerSpec]) -> Result<Vec<ActShape>> {
        if input_shape.contains(&0) {
            return Err(Error::dim(format!("invalid input shape {input_shape:?}")));
        }
        if layers.is_empty() {
            return Err(Error::contract("a model needs at least one layer"));
        }
        let mut shapes: Vec<ActShape> = Vec::with_capacity(layers.len());
        let mut in_decoder = false;
        let mut class_caps: Option<usize> = None;
        for (idx, layer) in layers.iter().enumerate() {
            let input = if layer.is_decoder() {
                if !in_decoder {
                    let Some(cc) = class_caps.filter(|&cc| cc + 1 == idx) else {
                        return Err(Error::dim(format!("layer {idx}: decoder must directly follow the class capsules")));
                    };
                    ActShape::Flat(shapes[cc].len())
                } else {
                    shapes[idx - 1]
                }
            } else {
                if in_decoder {
                    return Err(Error::dim(format!("layer {idx}: only decoder layers may follow the decoder")));
                }
                if idx == 0 { input_map(input_shape) } else { shapes[idx - 1] }
            };
            in_decoder |= layer.is_decoder();
            let shape = infer_shape(idx, layer, input, &shapes)?;
            if matches!(layer, LayerSpec::ClassCaps { .. }) {
                class_caps = Some(idx);
            }
            shapes.push(shape);
        }
        let head = layers.iter().rposition(|l| !l.is_decoder()).expect("non-decoder layer exists");
        let outputs = match shapes[head] {
            ActShape::Caps { n, .. } => n,
            other => other.len(),
        };
        if outputs != class_count {
            return Err(Error::dim(format!("model produces {outputs} outputs for {class_count} classes")));
        }
        if in_decoder {
            let last = *shapes.last().expect("nonempty");
            let pixels: usize = input_shape.iter().product();
            if last.len() != pixels {
                return Err(Error::dim(format!("decoder emits {} values for {pixels}-pixel images", last.len())));
            }
        }
        Ok(shapes)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::dim(format!("{name}: shape {:?} cannot replace {:?}", value.shape(), p.value.shape())));
        }
        p.value = value;
        Ok(())
    }

    /// Parameter indices owned by layer `idx`.
    pub fn layer_params(&self, idx: usize) -> &[usize] {
        &self.layer_params[idx]
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> &[ActShape] {
        &self.shapes
    }

    pub fn layer_input_shape(&self, idx: usize) -> ActShape {
        if idx == 0 {
            input_map(self.input_shape)
        } else if self.layers[idx].is_decoder() && !self.layers[idx - 1].is_decoder() {
            ActShape::Flat(self.shapes[idx - 1].len())
        } else {
            self.shapes[idx - 1]
        }
    }

    pub fn has_decoder(&self) -> bool {
        self.layers.iter().any(LayerSpec::is_decoder)
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Dropout { .. }))
    }

    /// Number of classification layers (everything before the decoder).
    pub fn head_len(&self) -> usize {
        self.layers.iter().take_while(|l| !l.is_decoder()).count()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

fn input_map(s: [usize; 3]) -> ActShape {
    ActShape::Map { c: s[0], h: s[1], w: s[2] }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_chain_for_capsnet() {
        let m = zoo::capsnet([1, 28, 28], 3, &zoo::CapsNetConfig::default(), 1).unwrap();
        let shapes = m.shapes();
        assert_eq!(shapes[0], ActShape::Map { c: 256, h: 20, w: 20 });
        let pc = m.layers().iter().position(|l| matches!(l, LayerSpec::PrimaryCaps { .. })).unwrap();
        assert_eq!(shapes[pc], ActShape::Caps { n: 1152, dim: 8 });
        assert_eq!(*shapes.last().unwrap(), ActShape::Flat(784));
    }

    #[test]
    fn construction_rejects_bad_graphs() {
        let conv = LayerSpec::Conv2D { filters: 2, kernel: 3, stride: 1, padding: 0 };
        assert!(ModelGraph::new([1, 4, 4], 3, vec![LayerSpec::Dense { units: 3 }], 0).is_err());
        assert!(ModelGraph::new([1, 4, 4], 3, vec![LayerSpec::Flatten, LayerSpec::Dense { units: 2 }], 0).is_err());
        assert!(ModelGraph::new([1, 2, 2], 2, vec![conv.clone(), LayerSpec::Flatten], 0).is_err());
        let bad_add = vec![conv, LayerSpec::Add { source: 5 }, LayerSpec::Flatten];
        assert!(ModelGraph::new([1, 4, 4], 8, bad_add, 0).is_err());
        let bad_dropout = vec![LayerSpec::Flatten, LayerSpec::Dropout { rate: 1.0 }];
        assert!(ModelGraph::new([1, 1, 2], 2, bad_dropout, 0).is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_owned() {
        let m = zoo::residual([1, 12, 12], 3, 2, 4, 7).unwrap();
        let mut names: Vec<_> = m.params().iter().map(|p| p.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        for (i, p) in m.params().iter().enumerate() {
            assert!(m.layer_params(p.layer).contains(&i));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = zoo::toy_cnn([1, 28, 28], 3, 3).unwrap();
        let b = zoo::toy_cnn([1, 28, 28], 3, 3).unwrap();
        let c = zoo::toy_cnn([1, 28, 28], 3, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
