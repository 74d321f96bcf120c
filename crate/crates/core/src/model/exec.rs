use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ActShape, LayerSpec, ModelGraph, ParamRole};
use crate::capsnet;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, PoolMode, Tape, Tensor};

/// Which capsule the decoder sees; all others are zero-masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeTarget {
    Skip,
    Class(usize),
    Argmax,
}

/// Node handles produced by [`ModelGraph::record`].
#[derive(Clone, Debug)]
pub struct Recorded {
    /// Output node of every layer, in layer order.
    pub layers: Vec<NodeId>,
    /// One node per model parameter, in parameter order.
    pub params: Vec<NodeId>,
    /// Classification head before any terminal Softmax: logits, or capsule lengths.
    pub logits: NodeId,
    /// Classification output, `class_count` values.
    pub output: NodeId,
    /// Class capsule vectors `[classes, dim]` for capsule models.
    pub capsules: Option<NodeId>,
    /// Routing couplings after each iteration.
    pub couplings: Vec<NodeId>,
    pub decoded: Option<NodeId>,
}

pub(crate) struct ExecOptions<'r> {
    pub training: bool,
    pub trainable: Option<&'r [bool]>,
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
    pub decode: DecodeTarget,
}

impl ExecOptions<'_> {
    pub fn inference() -> Self {
        ExecOptions { training: false, trainable: None, dropout_rng: None, decode: DecodeTarget::Skip }
    }
}

impl ModelGraph {
    /// Records the forward pass of one sample `[C, H, W]` onto `tape`.
    pub(crate) fn record<'a>(&'a self, tape: &mut Tape<'a>, input: NodeId, opts: ExecOptions<'_>) -> Result<Recorded> {
        let expected = self.input_shape;
        if tape.value(input).shape() != expected {
            return Err(Error::dim(format!("input {:?} does not match model input {expected:?}", tape.value(input).shape())));
        }
        let ExecOptions { training, trainable, mut dropout_rng, decode } = opts;
        let params: Vec<NodeId> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(&p.value, trainable.is_some_and(|t| t[i]) && p.trainable()))
            .collect();
        let head_len = self.head_len();
        let last_head = head_len - 1;

        let mut outs: Vec<NodeId> = Vec::with_capacity(self.layers.len());
        let mut couplings = Vec::new();
        let mut capsules = None;
        let mut logits = None;
        let mut decoded = None;
        let mut x = input;
        for (idx, layer) in self.layers.iter().enumerate() {
            let p = |k: usize| params[self.layer_params[idx][k]];
            if idx == head_len {
                match self.decoder_input(tape, capsules, logits, decode)? {
                    Some(masked) => x = masked,
                    None => break,
                }
            }
            x = match *layer {
                LayerSpec::Conv2D { stride, padding, .. } => {
                    let y = tape.conv2d(x, p(0), stride, padding)?;
                    tape.channel_bias(y, p(1))?
                }
                LayerSpec::Dense { .. } => tape.dense(x, p(0), p(1))?,
                LayerSpec::DecoderDense { .. } => {
                    let y = tape.dense(x, p(0), p(1))?;
                    if idx + 1 == self.layers.len() { tape.sigmoid(y) } else { tape.relu(y) }
                }
                LayerSpec::AvgPool { window, stride } => tape.pool2d(x, window, stride, PoolMode::Avg)?,
                LayerSpec::MaxPool { window, stride } => tape.pool2d(x, window, stride, PoolMode::Max)?,
                LayerSpec::Flatten => {
                    let n = tape.value(x).len();
                    tape.reshape(x, vec![n])?
                }
                LayerSpec::ZeroPad { amount } => tape.zero_pad(x, amount)?,
                LayerSpec::ReLU => tape.relu(x),
                LayerSpec::Softmax => {
                    if idx == last_head {
                        logits = Some(x);
                    }
                    tape.softmax(x)
                }
                LayerSpec::Dropout { rate } => match dropout_rng.as_deref_mut() {
                    Some(rng) if training && rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let n = tape.value(x).len();
                        let mask: Vec<f32> = (0..n).map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect();
                        let shape = tape.value(x).shape().to_vec();
                        tape.mul_const(x, &Tensor::from_parts(shape, mask))?
                    }
                    _ => x,
                },
                LayerSpec::BatchNorm { eps } => {
                    let ids = &self.layer_params[idx];
                    let stat = |role: ParamRole| -> &[f32] {
                        let id = ids.iter().copied().find(|&i| self.params[i].role == role).expect("batch-norm owns its statistics");
                        self.params[id].value.data()
                    };
                    tape.batch_norm(x, p(0), p(1), stat(ParamRole::Mean), stat(ParamRole::Var), eps)?
                }
                LayerSpec::Add { source } => tape.add(x, outs[source])?,
                LayerSpec::PrimaryCaps { channels, caps_dim, stride, .. } => {
                    capsnet::record_primary_caps(tape, x, p(0), p(1), channels, caps_dim, stride)?
                }
                LayerSpec::ClassCaps { routing_iters, .. } => {
                    let u_hat = tape.caps_predict(x, p(0))?;
                    let routed = capsnet::record_routing(tape, u_hat, routing_iters)?;
                    couplings = routed.couplings;
                    capsules = Some(routed.v);
                    routed.v
                }
            };
            outs.push(x);
            if idx == last_head && logits.is_none() {
                logits = Some(match self.shapes[idx] {
                    ActShape::Caps { .. } => tape.row_norm(x),
                    _ => x,
                });
            }
        }
        let logits = logits.expect("head layer exists");
        let output = match self.shapes[last_head] {
            ActShape::Caps { .. } => logits,
            _ => outs[last_head],
        };
        if self.has_decoder() && decode != DecodeTarget::Skip {
            decoded = outs.last().copied();
        }
        let output = flatten_node(tape, output)?;
        let logits = flatten_node(tape, logits)?;
        Ok(Recorded { layers: outs, params, logits, output, capsules, couplings, decoded })
    }

    /// Masked, flattened class capsules; `None` when decoding is skipped.
    fn decoder_input(&self, tape: &mut Tape<'_>, capsules: Option<NodeId>, lengths: Option<NodeId>, decode: DecodeTarget) -> Result<Option<NodeId>> {
        let caps = capsules.ok_or_else(|| Error::contract("decoder needs class capsules"))?;
        let class = match decode {
            DecodeTarget::Skip => return Ok(None),
            DecodeTarget::Class(k) => k,
            DecodeTarget::Argmax => {
                let l = lengths.expect("capsule lengths precede the decoder");
                tape.value(l).argmax()
            }
        };
        let [n, dim] = *tape.value(caps).shape() else { unreachable!("capsules are [N, D]") };
        if class >= n {
            return Err(Error::contract(format!("decode class {class} out of range for {n} capsules")));
        }
        let mut mask = vec![0.0f32; n * dim];
        mask[class * dim..(class + 1) * dim].fill(1.0);
        let masked = tape.mul_const(caps, &Tensor::from_parts(vec![n, dim], mask))?;
        tape.reshape(masked, vec![n * dim]).map(Some)
    }

    /// Class scores for one sample: logits or probabilities for CNNs, capsule
    /// lengths for capsule models.
    pub fn predict_sample(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.reshape(self.input_shape.to_vec())?);
        let rec = self.record(&mut tape, x, ExecOptions::inference())?;
        Ok(tape.value(rec.output).clone())
    }

    /// Batched forward pass over `[N, C, H, W]`; returns `[N, class_count]`.
    /// With `training` set, dropout masks come from `seed` with one stream per sample.
    pub fn forward(&self, batch: &Tensor, training: bool) -> Result<Tensor> {
        self.forward_seeded(batch, training, 0)
    }

    pub fn forward_seeded(&self, batch: &Tensor, training: bool, seed: u64) -> Result<Tensor> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::dim(format!("batch {:?} does not match model input {:?}", s, self.input_shape)));
        }
        let per = self.input_shape.iter().product::<usize>();
        let rows: Vec<Vec<f32>> = batch
            .data()
            .par_chunks_exact(per)
            .enumerate()
            .map(|(i, img)| {
                let mut rng = dropout_rng(seed, i as u64);
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::from_parts(self.input_shape.to_vec(), img.to_vec()));
                let opts = ExecOptions { training, trainable: None, dropout_rng: Some(&mut rng), decode: DecodeTarget::Skip };
                let rec = self.record(&mut tape, x, opts)?;
                Ok(tape.value(rec.output).data().to_vec())
            })
            .collect::<Result<_>>()?;
        let n = rows.len();
        Ok(Tensor::from_parts(vec![n, self.class_count], rows.concat()))
    }

    /// Predicted class for each image of `[N, C, H, W]`.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let out = self.forward(batch, false)?;
        Ok(out.data().chunks_exact(self.class_count).map(crate::tensor::argmax).collect())
    }

    /// Inference-mode output of every layer for one sample.
    pub fn layer_outputs(&self, image: &[f32]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(self.input_shape.to_vec(), image.to_vec())?);
        let rec = self.record(&mut tape, x, ExecOptions::inference())?;
        Ok(rec.layers.iter().map(|&id| tape.value(id).clone()).collect())
    }

    /// Runs only the decoder on a flattened `[classes·dim]` capsule activation.
    pub fn decode(&self, masked_capsules: &[f32]) -> Result<Tensor> {
        let start = self.head_len();
        if start == self.layers.len() {
            return Err(Error::contract("model has no decoder"));
        }
        let mut tape = Tape::new();
        let mut x = tape.constant(Tensor::new(vec![masked_capsules.len()], masked_capsules.to_vec())?);
        if masked_capsules.len() != self.layer_input_shape(start).len() {
            return Err(Error::dim(format!(
                "decoder expects {} values, got {}",
                self.layer_input_shape(start).len(),
                masked_capsules.len()
            )));
        }
        for idx in start..self.layers.len() {
            let ids = &self.layer_params[idx];
            let w = tape.param(&self.params[ids[0]].value, false);
            let b = tape.param(&self.params[ids[1]].value, false);
            let y = tape.dense(x, w, b)?;
            x = if idx + 1 == self.layers.len() { tape.sigmoid(y) } else { tape.relu(y) };
        }
        let [c, h, w] = self.input_shape;
        tape.value(x).reshape(vec![c, h, w])
    }
}

pub(crate) fn dropout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn flatten_node(tape: &mut Tape<'_>, id: NodeId) -> Result<NodeId> {
    if tape.value(id).rank() == 1 {
        return Ok(id);
    }
    let n = tape.value(id).len();
    tape.reshape(id, vec![n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::zoo;

    fn identity_dense(n: usize) -> ModelGraph {
        let mut m = ModelGraph::new([1, 1, n], n, vec![LayerSpec::Flatten, LayerSpec::Dense { units: n }], 0).unwrap();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        m.set_param("1.dense.weight", Tensor::new(vec![n, n], w).unwrap()).unwrap();
        m
    }

    #[test]
    fn flatten_identity_dense_is_identity() {
        let m = identity_dense(4);
        let x = Tensor::new(vec![2, 1, 1, 4], vec![1.0, -2.0, 3.0, 0.5, 0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.forward(&x, false).unwrap().data(), x.data());
    }

    #[test]
    fn add_of_its_own_source_doubles() {
        // Add(source = 0) right after layer 0 sums the value with itself.
        let m = ModelGraph::new([1, 1, 3], 3, vec![LayerSpec::Flatten, LayerSpec::Add { source: 0 }], 0).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 3], vec![1.0, -2.0, 0.25]).unwrap();
        assert_eq!(m.forward(&x, false).unwrap().data(), &[2.0, -4.0, 0.5]);
    }

    #[test]
    fn training_flag_only_matters_with_dropout() {
        let m = zoo::toy_cnn([1, 28, 28], 3, 1).unwrap();
        let x = Tensor::full(vec![2, 1, 28, 28], 0.3).unwrap();
        assert_eq!(m.forward(&x, true).unwrap(), m.forward(&x, false).unwrap());

        let d = zoo::dense_mlp([1, 4, 4], &[8], 3, 0.5, None, 1).unwrap();
        let x = Tensor::full(vec![1, 1, 4, 4], 0.7).unwrap();
        assert_ne!(d.forward(&x, true).unwrap(), d.forward(&x, false).unwrap());
    }

    #[test]
    fn capsule_lengths_are_below_one() {
        let cfg = zoo::CapsNetConfig { conv_filters: 16, primary_channels: 4, ..Default::default() };
        let m = zoo::capsnet([1, 28, 28], 3, &cfg, 5).unwrap();
        let x = Tensor::full(vec![1, 1, 28, 28], 0.5).unwrap();
        let out = m.forward(&x, false).unwrap();
        assert_eq!(out.shape(), &[1, 3]);
        assert!(out.data().iter().all(|&l| (0.0..1.0).contains(&l)));
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let m = identity_dense(4);
        assert!(m.forward(&Tensor::zeros(vec![1, 1, 2, 2]).unwrap(), false).is_err());
    }
}
