//! ANN to SNN conversion: BatchNorm folding, layer validation, lowering of
//! linear runs to dense matrices and percentile-based threshold normalization.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::network::{Encoding, SpikingLayer, SpikingNetwork};
use super::sim::{self, SimConfig, DEFAULT_TIMESTEPS};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::{LayerSpec, ModelGraph, ParamRole};
use crate::tensor::kernels::{self, PoolMode};
use crate::tensor::{argmax, Tensor};

pub const DEFAULT_PERCENTILE: f64 = 99.9;

/// Outcome of a conversion.
#[derive(Clone, Debug, PartialEq)]
pub struct ConversionReport {
    /// Scale factor of each spiking population, in order.
    pub lambdas: Vec<f32>,
    /// Source-model layer each population encodes.
    pub source_layers: Vec<usize>,
    pub percentile: f64,
    /// Layers removed or rewritten during conversion.
    pub diagnostics: Vec<String>,
    /// Constant added to every output pre-activation before scaling.
    pub output_shift: f32,
    pub ann_accuracy: f64,
    /// Calibration-set accuracy of the spiking network; absent when evaluation was skipped.
    pub snn_accuracy: Option<f64>,
    pub eval_timesteps: Option<usize>,
}

impl ConversionReport {
    /// `ann_accuracy − snn_accuracy`.
    pub fn conversion_gap(&self) -> Option<f64> {
        self.snn_accuracy.map(|s| self.ann_accuracy - s)
    }

    /// One row per population, then the summary as `key,value` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("population,source_layer,lambda\n");
        for (i, (l, s)) in self.lambdas.iter().zip(&self.source_layers).enumerate() {
            let _ = writeln!(out, "{i},{s},{l:.9}");
        }
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(out, "\nkey,value");
        let _ = writeln!(out, "percentile,{}", self.percentile);
        let _ = writeln!(out, "output_shift,{:.6}", self.output_shift);
        let _ = writeln!(out, "ann_accuracy,{:.6}", self.ann_accuracy);
        let _ = writeln!(out, "snn_accuracy,{}", opt(self.snn_accuracy));
        let _ = writeln!(out, "conversion_gap,{}", opt(self.conversion_gap()));
        let _ = writeln!(out, "eval_timesteps,{}", self.eval_timesteps.map(|t| t.to_string()).unwrap_or_default());
        for d in &self.diagnostics {
            let _ = writeln!(out, "diagnostic,\"{}\"", d.replace('"', "'"));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvertOptions {
    pub percentile: f64,
    /// Timesteps for the constant-current calibration evaluation; `None` skips it.
    pub eval_timesteps: Option<usize>,
    pub output_shift: OutputShift,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions { percentile: DEFAULT_PERCENTILE, eval_timesteps: Some(DEFAULT_TIMESTEPS), output_shift: OutputShift::Auto }
    }
}

/// Uniform offset for the output population's bias. Adding one constant to
/// every logit changes neither the argmax nor a softmax, but a neuron can only
/// report a positive value, so all-negative logits would otherwise read out
/// as a silent tie.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputShift {
    /// Chosen from the calibration logits.
    Auto,
    Fixed(f32),
}

/// Every reason the model cannot be converted; empty when it can.
pub fn validate_convertible(model: &ModelGraph) -> Vec<String> {
    let layers = model.layers();
    let last = layers.len() - 1;
    let mut violations = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::Add { .. } => violations.push(format!("layer {i} (Add): residual skip-connection unsupported")),
            LayerSpec::PrimaryCaps { .. } => violations.push(format!("layer {i} (PrimaryCaps): capsule layer unsupported")),
            LayerSpec::ClassCaps { .. } => violations.push(format!("layer {i} (ClassCaps): capsule layer unsupported")),
            LayerSpec::DecoderDense { .. } => violations.push(format!("layer {i} (DecoderDense): capsule layer unsupported")),
            LayerSpec::MaxPool { .. } => violations.push(format!("layer {i} (MaxPool): max pooling unsupported")),
            LayerSpec::Softmax if i != last => {
                violations.push(format!("layer {i} (Softmax): softmax only supported as the final layer"))
            }
            LayerSpec::BatchNorm { .. } if !follows_linear(layers, i) => violations.push(format!(
                "layer {i} (BatchNorm): batch normalization must directly follow a convolution or dense layer"
            )),
            _ => {}
        }
    }
    violations
}

fn follows_linear(layers: &[LayerSpec], i: usize) -> bool {
    i > 0 && matches!(layers[i - 1], LayerSpec::Conv2D { .. } | LayerSpec::Dense { .. })
}

/// Folds every BatchNorm into the preceding convolution or dense layer.
pub fn fold_batchnorm(model: &ModelGraph) -> Result<ModelGraph> {
    fold_with_map(model).map(|(m, _)| m)
}

/// Folded model plus, for each of its layers, the original layer whose
/// output it reproduces.
fn fold_with_map(model: &ModelGraph) -> Result<(ModelGraph, Vec<usize>)> {
    let layers = model.layers();
    let bad: Vec<String> = (0..layers.len())
        .filter(|&i| matches!(layers[i], LayerSpec::BatchNorm { .. }) && !follows_linear(layers, i))
        .map(|i| format!("layer {i} (BatchNorm): batch normalization must directly follow a convolution or dense layer"))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Unconvertible(bad));
    }
    let values = |i: usize| -> Vec<Tensor> { model.layer_params(i).iter().map(|&p| model.params()[p].value.clone()).collect() };
    let role = |i: usize, r: ParamRole| -> &[f32] {
        let p = model.layer_params(i).iter().find(|&&p| model.params()[p].role == r).expect("batchnorm owns every role");
        model.params()[*p].value.data()
    };
    let mut out_layers: Vec<LayerSpec> = Vec::new();
    let mut out_values: Vec<Vec<Tensor>> = Vec::new();
    let mut origin = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let LayerSpec::BatchNorm { eps } = *layer else {
            out_layers.push(layer.clone());
            out_values.push(values(i));
            origin.push(i);
            continue;
        };
        let (gamma, beta, mean, var) = (role(i, ParamRole::Gamma), role(i, ParamRole::Beta), role(i, ParamRole::Mean), role(i, ParamRole::Var));
        let prev = out_values.last_mut().expect("batchnorm follows a linear layer");
        let (w, b) = prev.split_at_mut(1);
        let per = w[0].len() / gamma.len();
        for c in 0..gamma.len() {
            let s = gamma[c] as f64 / (var[c] as f64 + eps as f64).sqrt();
            for v in &mut w[0].data_mut()[c * per..(c + 1) * per] {
                *v = (*v as f64 * s) as f32;
            }
            let bias = &mut b[0].data_mut()[c];
            *bias = (s * (*bias as f64 - mean[c] as f64) + beta[c] as f64) as f32;
        }
        *origin.last_mut().expect("nonempty") = i;
    }
    let folded = ModelGraph::from_layer_params(model.input_shape(), model.class_count(), out_layers, out_values)?;
    Ok((folded, origin))
}

/// A maximal run of linear layers, optionally closed by a ReLU.
struct Segment {
    linear: Vec<usize>,
    relu: bool,
    /// Folded-model layer whose output the population encodes.
    end: usize,
}

fn segments(model: &ModelGraph) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut run = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            LayerSpec::ReLU => out.push(Segment { linear: std::mem::take(&mut run), relu: true, end: i }),
            LayerSpec::Dropout { .. } | LayerSpec::Softmax => {}
            _ => run.push(i),
        }
    }
    if let Some(&end) = run.last() {
        out.push(Segment { linear: run, relu: false, end });
    }
    out
}

/// Applies layer `idx` of `model` to `x`; with `bias` unset the affine
/// offset is dropped so the map is purely linear.
fn apply_linear(model: &ModelGraph, idx: usize, x: &Tensor, bias: bool) -> Result<Tensor> {
    let params: Vec<&Tensor> = model.layer_params(idx).iter().map(|&p| &model.params()[p].value).collect();
    let x = x.reshape(model.layer_input_shape(idx).dims())?;
    match *model.layers().get(idx).expect("index from segments") {
        LayerSpec::Conv2D { stride, padding, .. } => {
            let mut y = kernels::conv2d(&x, params[0], stride, padding)?;
            if bias {
                let per = y.len() / params[1].len();
                for (chunk, &b) in y.data_mut().chunks_exact_mut(per).zip(params[1].data()) {
                    chunk.iter_mut().for_each(|v| *v += b);
                }
            }
            Ok(y)
        }
        LayerSpec::Dense { .. } => {
            if bias {
                kernels::dense(&x, params[0], params[1])
            } else {
                kernels::dense(&x, params[0], &params[1].zeros_like())
            }
        }
        LayerSpec::AvgPool { window, stride } => kernels::pool2d(&x, window, stride, PoolMode::Avg),
        LayerSpec::Flatten => x.reshape(vec![x.len()]),
        LayerSpec::ZeroPad { amount } => {
            let (c, h, w) = x.dims3()?;
            let (ph, pw) = (h + 2 * amount, w + 2 * amount);
            let mut out = vec![0.0f32; c * ph * pw];
            for ch in 0..c {
                for r in 0..h {
                    let src = &x.data()[(ch * h + r) * w..(ch * h + r + 1) * w];
                    let dst = (ch * ph + r + amount) * pw + amount;
                    out[dst..dst + w].copy_from_slice(src);
                }
            }
            Tensor::new(vec![c, ph, pw], out)
        }
        ref other => Err(Error::contract(format!("layer {idx} ({}) is not linear", other.kind()))),
    }
}

/// Dense `[out, in]` matrix and bias of a linear run, found by probing basis vectors.
fn lower(model: &ModelGraph, seg: &Segment, inputs: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    let run = |x: Tensor, bias: bool| -> Result<Tensor> {
        seg.linear.iter().try_fold(x, |x, &idx| apply_linear(model, idx, &x, bias))
    };
    let in_shape = match seg.linear.first() {
        Some(&i) => model.layer_input_shape(i).dims(),
        None => vec![inputs],
    };
    let bias = run(Tensor::zeros(in_shape.clone())?, true)?.into_data();
    let outputs = bias.len();
    let columns: Vec<Vec<f32>> = (0..inputs)
        .into_par_iter()
        .map(|i| {
            let mut e = vec![0.0f32; inputs];
            e[i] = 1.0;
            run(Tensor::new(in_shape.clone(), e)?, false).map(Tensor::into_data)
        })
        .collect::<Result<_>>()?;
    let mut weights = vec![0.0f32; outputs * inputs];
    for (i, col) in columns.iter().enumerate() {
        for (o, &v) in col.iter().enumerate() {
            weights[o * inputs + i] = v;
        }
    }
    Ok((weights, bias))
}

/// Linear-interpolated percentile of a sorted slice.
fn percentile_sorted(sorted: &[f32], p: f64) -> f32 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    let frac = rank - lo as f64;
    (sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)) as f32
}

/// Row-batched `relu?(X·Wᵀ + b)` for `X` of shape `[n, inputs]`.
fn affine_batch(x: &[f32], n: usize, w: &[f32], b: &[f32], relu: bool) -> Vec<f32> {
    let (outputs, inputs) = (b.len(), w.len() / b.len());
    let mut y: Vec<f32> = b.iter().copied().cycle().take(n * outputs).collect();
    kernels::gemm(n, inputs, outputs, x, false, w, true, 1.0, &mut y);
    if relu {
        y.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    y
}

/// Smallest shift that leaves every calibration sample with a positive top logit.
fn auto_shift(logits: &[f32], classes: usize) -> f32 {
    let lowest_top = logits
        .chunks_exact(classes)
        .map(|row| row.iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .fold(f32::INFINITY, f32::min);
    (-lowest_top).max(0.0)
}

/// Converts with `percentile` and evaluates on the calibration set at the default horizon.
pub fn normalize_and_convert(model: &ModelGraph, calibration: &LabeledImageSet, percentile: f64) -> Result<(SpikingNetwork, ConversionReport)> {
    normalize_and_convert_with(model, calibration, &ConvertOptions { percentile, ..ConvertOptions::default() })
}

pub fn normalize_and_convert_with(model: &ModelGraph, calibration: &LabeledImageSet, opts: &ConvertOptions) -> Result<(SpikingNetwork, ConversionReport)> {
    let violations = validate_convertible(model);
    if !violations.is_empty() {
        return Err(Error::Unconvertible(violations));
    }
    if calibration.is_empty() {
        return Err(Error::contract("calibration set is empty"));
    }
    if !(opts.percentile > 0.0 && opts.percentile <= 100.0) {
        return Err(Error::contract(format!("percentile must be in (0, 100], got {}", opts.percentile)));
    }
    if calibration.image_shape() != model.input_shape() {
        return Err(Error::dim(format!(
            "calibration images {:?} do not match model input {:?}",
            calibration.image_shape(),
            model.input_shape()
        )));
    }
    let (folded, origin) = fold_with_map(model)?;
    let mut diagnostics = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            LayerSpec::BatchNorm { .. } => diagnostics.push(format!("batch normalization folded into layer {} (layer {i})", i - 1)),
            LayerSpec::Dropout { .. } => diagnostics.push(format!("dropout removed (layer {i})")),
            LayerSpec::Softmax => diagnostics.push(format!("terminal softmax stripped (layer {i})")),
            _ => {}
        }
    }

    let n = calibration.len();
    let mut acts = calibration.images().data().to_vec();
    let mut inputs = calibration.image_len();
    let mut lambda_prev = 1.0f32;
    let mut layers = Vec::new();
    let mut lambdas = Vec::new();
    let mut source_layers = Vec::new();
    let mut output_shift = 0.0f32;
    let segs = segments(&folded);
    for (l, seg) in segs.iter().enumerate() {
        let (w, mut b) = lower(&folded, seg, inputs)?;
        let outputs = b.len();
        acts = affine_batch(&acts, n, &w, &b, seg.relu);
        if l + 1 == segs.len() && !seg.relu {
            output_shift = match opts.output_shift {
                OutputShift::Auto => auto_shift(&acts, outputs),
                OutputShift::Fixed(c) => c,
            };
            acts.iter_mut().chain(b.iter_mut()).for_each(|v| *v += output_shift);
        }
        let mut positive: Vec<f32> = acts.iter().copied().filter(|&v| v > 0.0).collect();
        let source = origin[seg.end];
        if positive.is_empty() {
            return Err(Error::DegenerateScale { layer: source, name: format!("population {l} ({})", model.layers()[source].kind()) });
        }
        positive.sort_unstable_by(f32::total_cmp);
        let lambda = percentile_sorted(&positive, opts.percentile);
        let scale = lambda_prev / lambda;
        let w: Vec<f32> = w.iter().map(|&v| (v as f64 * scale as f64) as f32).collect();
        let b: Vec<f32> = b.iter().map(|&v| (v as f64 / lambda as f64) as f32).collect();
        layers.push(SpikingLayer::new(inputs, outputs, w, b, 1.0, source)?);
        lambdas.push(lambda);
        source_layers.push(source);
        lambda_prev = lambda;
        inputs = outputs;
    }
    let classes = model.class_count();
    let ann_hits = acts.chunks_exact(classes).zip(calibration.labels()).filter(|(row, &y)| argmax(row) == y).count();
    let net = SpikingNetwork::new(model.input_shape(), Encoding::ConstantCurrent, classes, layers)?;
    let snn_accuracy = match opts.eval_timesteps {
        Some(t) => Some(sim::accuracy(&net, calibration, &SimConfig { timesteps: t, ..SimConfig::default() })?),
        None => None,
    };
    let report = ConversionReport {
        lambdas,
        source_layers,
        percentile: opts.percentile,
        output_shift,
        diagnostics,
        ann_accuracy: ann_hits as f64 / n as f64,
        snn_accuracy,
        eval_timesteps: opts.eval_timesteps,
    };
    Ok((net, report))
}

/// Mean `|count/T − max(a, 0)/λ|` per population over one sample, where `a`
/// is the source model's activation at the population's source layer (plus
/// the output shift for the last population) and `λ` its scale factor.
pub fn rate_correspondence(net: &SpikingNetwork, source: &ModelGraph, report: &ConversionReport, image: &[f32], timesteps: usize) -> Result<Vec<f64>> {
    let pops = net.layers();
    if report.lambdas.len() != pops.len() || report.source_layers.len() != pops.len() {
        return Err(Error::contract(format!("report covers {} populations, network has {}", report.lambdas.len(), pops.len())));
    }
    if source.input_shape() != net.input_shape() || source.class_count() != net.class_count() {
        return Err(Error::contract("network was not compiled from this model"));
    }
    let acts = source.layer_outputs(image)?;
    let cfg = SimConfig { timesteps, encoder: Encoding::ConstantCurrent, ..SimConfig::default() };
    let trace = sim::run_inference(net, image, &cfg, 0)?;
    let last = pops.len() - 1;
    pops.iter()
        .enumerate()
        .map(|(l, layer)| {
            let a = acts.get(layer.source_layer()).filter(|a| a.len() == layer.outputs()).ok_or_else(|| {
                Error::contract(format!("population {l} does not match source layer {}", layer.source_layer()))
            })?;
            let shift = if l == last { report.output_shift } else { 0.0 };
            let lambda = report.lambdas[l] as f64;
            let total: f64 = trace.counts[l]
                .iter()
                .zip(a.data())
                .map(|(&c, &v)| (c as f64 / timesteps as f64 - (v + shift).max(0.0) as f64 / lambda).abs())
                .sum();
            Ok(total / layer.outputs() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::zoo;

    fn single_dense(w: f32) -> ModelGraph {
        let layers = vec![LayerSpec::Flatten, LayerSpec::Dense { units: 1 }, LayerSpec::ReLU];
        let values = vec![vec![], vec![Tensor::new(vec![1, 1], vec![w]).unwrap(), Tensor::vector(vec![0.0]).unwrap()], vec![]];
        ModelGraph::from_layer_params([1, 1, 1], 1, layers, values).unwrap()
    }

    fn calib(values: &[f32]) -> LabeledImageSet {
        let n = values.len();
        LabeledImageSet::new(Tensor::new(vec![n, 1, 1, 1], values.to_vec()).unwrap(), vec![0; n], vec![0; n], vec!["a".into()]).unwrap()
    }

    #[test]
    fn single_dense_scales_to_unit_weight() {
        let opts = ConvertOptions { percentile: 100.0, eval_timesteps: None, ..ConvertOptions::default() };
        let (net, report) = normalize_and_convert_with(&single_dense(2.0), &calib(&[0.25, 1.0, 0.5]), &opts).unwrap();
        assert_eq!(report.lambdas, vec![2.0]);
        assert_eq!(net.layers()[0].weights(), &[1.0]);
        assert_eq!(net.layers()[0].threshold(), 1.0);
    }

    #[test]
    fn unit_range_leaves_weights() {
        let opts = ConvertOptions { percentile: 100.0, eval_timesteps: None, ..ConvertOptions::default() };
        let (net, _) = normalize_and_convert_with(&single_dense(1.0), &calib(&[0.2, 1.0]), &opts).unwrap();
        assert_eq!(net.layers()[0].weights(), &[1.0]);
    }

    #[test]
    fn zero_activations_are_degenerate() {
        let opts = ConvertOptions { percentile: 100.0, eval_timesteps: None, ..ConvertOptions::default() };
        let err = normalize_and_convert_with(&single_dense(-1.0), &calib(&[0.5]), &opts).unwrap_err();
        assert!(matches!(err, Error::DegenerateScale { layer: 2, .. }));
    }

    #[test]
    fn rejections_are_named() {
        let res = zoo::residual([1, 8, 8], 3, 1, 2, 0).unwrap();
        assert!(validate_convertible(&res).iter().any(|v| v.contains("(Add): residual skip-connection unsupported")));
        let caps = zoo::capsnet([1, 28, 28], 3, &zoo::CapsNetConfig::default(), 0).unwrap();
        assert!(validate_convertible(&caps).iter().any(|v| v.ends_with("capsule layer unsupported")));
        assert!(validate_convertible(&zoo::toy_cnn([1, 28, 28], 3, 0).unwrap()).is_empty());
    }

    #[test]
    fn lowered_matrices_match_forward() {
        let dense: Vec<f32> = (0..96).map(|i| ((i * 37 % 11) as f32 - 5.0) / 20.0).collect();
        let m = ModelGraph::from_layer_params(
            [1, 16, 16],
            3,
            vec![
                LayerSpec::ZeroPad { amount: 1 },
                LayerSpec::Conv2D { filters: 2, kernel: 3, stride: 2, padding: 0 },
                LayerSpec::ReLU,
                LayerSpec::AvgPool { window: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
            ],
            vec![
                vec![],
                vec![Tensor::full(vec![2, 1, 3, 3], 0.3).unwrap(), Tensor::vector(vec![0.1, -0.2]).unwrap()],
                vec![],
                vec![],
                vec![],
                vec![Tensor::new(vec![3, 32], dense).unwrap(), Tensor::vector(vec![0.0, 0.1, 0.2]).unwrap()],
            ],
        )
        .unwrap();
        let image: Vec<f32> = (0..256).map(|i| (i % 7) as f32 / 7.0).collect();
        let segs = segments(&m);
        let mut x = image.clone();
        let mut inputs = 256;
        for seg in &segs {
            let (w, b) = lower(&m, seg, inputs).unwrap();
            x = affine_batch(&x, 1, &w, &b, seg.relu);
            inputs = b.len();
        }
        let expected = m.predict_sample(&Tensor::new(vec![1, 16, 16], image).unwrap()).unwrap();
        for (a, e) in x.iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn batchnorm_closed_form() {
        let layers = vec![LayerSpec::Flatten, LayerSpec::Dense { units: 1 }, LayerSpec::BatchNorm { eps: 0.0 }];
        let t = |v: Vec<f32>| Tensor::vector(v).unwrap();
        let values = vec![
            vec![],
            vec![Tensor::new(vec![1, 2], vec![0.5, -1.5]).unwrap(), t(vec![0.3])],
            vec![t(vec![2.0]), t(vec![0.7]), t(vec![0.1]), t(vec![4.0])],
        ];
        let m = ModelGraph::from_layer_params([1, 1, 2], 1, layers, values).unwrap();
        let f = fold_batchnorm(&m).unwrap();
        assert_eq!(f.layers().len(), 2);
        assert_eq!(f.params()[0].value.data(), &[0.5, -1.5]);
        assert!((f.params()[1].value.data()[0] - (0.3 - 0.1 + 0.7)).abs() < 1e-6);
        let bad = vec![LayerSpec::BatchNorm { eps: 1e-3 }, LayerSpec::Flatten];
        let bn = ModelGraph::new([1, 1, 1], 1, bad, 0).unwrap();
        assert!(matches!(fold_batchnorm(&bn), Err(Error::Unconvertible(_))));
    }
}
