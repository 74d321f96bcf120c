//! Capsule computation: squash, primary capsules, routing-by-agreement,
//! margin and reconstruction losses, and decoder perturbation sweeps.

use crate::error::{Error, Result};
use crate::model::{DecodeTarget, ExecOptions, ModelGraph};
use crate::tensor::{MarginParams, NodeId, Tape, Tensor};

/// Reconstruction weight used when none is configured.
pub const RECONSTRUCTION_WEIGHT: f32 = 0.0005;

/// Default explanation sweep: −0.25 to 0.25 in steps of 0.05.
pub fn default_deltas() -> Vec<f32> {
    (-5..=5).map(|i| i as f32 * 0.05).collect()
}

/// Routing logits and couplings after one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    /// `[N_in, N_out]`.
    pub logits: Tensor,
    /// `[N_in, N_out]`, each row sums to 1.
    pub couplings: Tensor,
}

pub(crate) struct Routed {
    pub v: NodeId,
    /// Logits consumed by each iteration's softmax.
    pub logits: Vec<NodeId>,
    pub couplings: Vec<NodeId>,
}

/// `‖s‖²/(1+‖s‖²) · s/‖s‖`; zero maps to zero.
pub fn squash(s: &[f32]) -> Vec<f32> {
    if s.is_empty() {
        return Vec::new();
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_parts(vec![s.len()], s.to_vec()));
    let y = tape.squash(x);
    tape.value(y).data().to_vec()
}

pub(crate) fn record_primary_caps(
    tape: &mut Tape<'_>,
    features: NodeId,
    kernels: NodeId,
    bias: NodeId,
    channels: usize,
    caps_dim: usize,
    stride: usize,
) -> Result<NodeId> {
    let filters = tape.value(kernels).shape()[0];
    if filters != channels * caps_dim {
        return Err(Error::dim(format!("{filters} kernels cannot form {channels} channels of {caps_dim}-d capsules")));
    }
    let y = tape.conv2d(features, kernels, stride, 0)?;
    let y = tape.channel_bias(y, bias)?;
    let caps = tape.caps_layout(y, channels, caps_dim)?;
    Ok(tape.squash(caps))
}

/// Primary capsules `[channels·H'·W', caps_dim]` from a `[C, H, W]` feature map
/// with `channels·caps_dim` kernels.
pub fn primary_caps(features: &Tensor, kernels: &Tensor, bias: &Tensor, channels: usize, caps_dim: usize, stride: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let k = tape.param(kernels, false);
    let b = tape.param(bias, false);
    let out = record_primary_caps(&mut tape, f, k, b, channels, caps_dim, stride)?;
    Ok(tape.value(out).clone())
}

/// Unrolled routing over predictions `û: [N_in, N_out, D]`; differentiable
/// through every iteration. The logit update is skipped on the last pass.
pub(crate) fn record_routing(tape: &mut Tape<'_>, u_hat: NodeId, iters: usize) -> Result<Routed> {
    if iters == 0 {
        return Err(Error::contract("routing needs at least one iteration"));
    }
    let [n_in, n_out, _] = *tape.value(u_hat).shape() else {
        return Err(Error::dim(format!("predictions must be [Nin, Nout, D], got {:?}", tape.value(u_hat).shape())));
    };
    let mut b = tape.constant(Tensor::from_parts(vec![n_in, n_out], vec![0.0; n_in * n_out]));
    let mut couplings = Vec::with_capacity(iters);
    let mut logits = Vec::with_capacity(iters);
    let mut v = None;
    for it in 0..iters {
        logits.push(b);
        let c = tape.softmax(b);
        couplings.push(c);
        let s = tape.weighted_sum(c, u_hat)?;
        let out = tape.squash(s);
        v = Some(out);
        if it + 1 < iters {
            let agreement = tape.agreement(u_hat, out)?;
            b = tape.add(b, agreement)?;
        }
    }
    Ok(Routed { v: v.expect("at least one iteration"), logits, couplings })
}

/// Records routing on `tape` and returns the output capsules `[N_out, D]`;
/// gradients flow into `u_hat` through every iteration.
pub fn route(tape: &mut Tape<'_>, u_hat: NodeId, iters: usize) -> Result<NodeId> {
    Ok(record_routing(tape, u_hat, iters)?.v)
}

/// Routing-by-agreement on fixed predictions. Returns the output capsules
/// `[N_out, D]` and the routing state after every iteration.
pub fn dynamic_routing(u_hat: &Tensor, iters: usize) -> Result<(Tensor, Vec<RoutingState>)> {
    if !u_hat.is_finite() {
        return Err(Error::Numeric { step: 0, message: "non-finite routing predictions".into() });
    }
    let mut tape = Tape::new();
    let u = tape.constant(u_hat.clone());
    let routed = record_routing(&mut tape, u, iters)?;
    let states = routed
        .logits
        .iter()
        .zip(&routed.couplings)
        .map(|(&b, &c)| RoutingState { logits: tape.value(b).clone(), couplings: tape.value(c).clone() })
        .collect();
    Ok((tape.value(routed.v).clone(), states))
}

/// Margin loss over capsule lengths with the default constants.
pub fn margin_loss(lengths: &[f32], label: usize) -> Result<f32> {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![lengths.len()], lengths.to_vec())?);
    let loss = tape.margin_loss(l, label, MarginParams::default())?;
    Ok(tape.value(loss).data()[0])
}

/// `weight · Σ (decoded − image)²`.
pub fn reconstruction_loss(decoded: &Tensor, image: &Tensor, weight: f32) -> Result<f32> {
    if decoded.len() != image.len() {
        return Err(Error::dim(format!("decoded {:?} vs image {:?}", decoded.shape(), image.shape())));
    }
    let sse: f64 = decoded.data().iter().zip(image.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    Ok((weight as f64 * sse) as f32)
}

/// Class capsule vectors `[classes, dim]` and lengths for one image.
pub fn class_capsules(model: &ModelGraph, image: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let mut tape = Tape::new();
    let x = tape.constant(image.reshape(model.input_shape().to_vec())?);
    let rec = model.record(&mut tape, x, ExecOptions::inference())?;
    let caps = rec.capsules.ok_or_else(|| Error::contract("model has no class capsules"))?;
    Ok((tape.value(caps).clone(), tape.value(rec.output).data().to_vec()))
}

/// Plain reconstruction from the longest class capsule.
pub fn reconstruct(model: &ModelGraph, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(image.reshape(model.input_shape().to_vec())?);
    let mut opts = ExecOptions::inference();
    opts.decode = DecodeTarget::Argmax;
    let rec = model.record(&mut tape, x, opts)?;
    let decoded = rec.decoded.ok_or_else(|| Error::contract("model has no decoder"))?;
    tape.value(decoded).reshape(model.input_shape().to_vec())
}

/// Adds each delta to dimension `dim_index` of capsule `capsule_index`, masks
/// every other capsule, and decodes. Images are returned in delta order.
pub fn perturb_and_decode(
    model: &ModelGraph,
    image: &Tensor,
    capsule_index: usize,
    dim_index: usize,
    deltas: &[f32],
) -> Result<Vec<Tensor>> {
    if !model.has_decoder() {
        return Err(Error::contract("model has no decoder"));
    }
    let (caps, _) = class_capsules(model, image)?;
    let [n, dim] = *caps.shape() else { unreachable!("capsules are [N, D]") };
    if capsule_index >= n {
        return Err(Error::contract(format!("capsule {capsule_index} out of range for {n} capsules")));
    }
    if dim_index >= dim {
        return Err(Error::contract(format!("dimension {dim_index} out of range for {dim}-d capsules")));
    }
    deltas
        .iter()
        .map(|&delta| {
            let mut masked = vec![0.0f32; n * dim];
            let row = &caps.data()[capsule_index * dim..(capsule_index + 1) * dim];
            masked[capsule_index * dim..(capsule_index + 1) * dim].copy_from_slice(row);
            masked[capsule_index * dim + dim_index] += delta;
            model.decode(&masked)
        })
        .collect()
}
