//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends one node holding its forward value plus whatever it
//! needs for the backward pass. Parents always have smaller ids than their
//! children, so a single reverse sweep visits each node exactly once.
//!
//! Ops are coarse (a whole convolution, a whole routing step) rather than
//! scalar, which keeps the tape small enough to build one per sample.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, col2im_add, gemm, ConvGeom, PoolMode};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Margin-loss hyperparameters: `m⁺`, `m⁻` and the absent-class weight `λ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginParams {
    pub m_plus: f32,
    pub m_minus: f32,
    pub lambda: f32,
}

impl Default for MarginParams {
    fn default() -> Self {
        MarginParams { m_plus: 0.9, m_minus: 0.1, lambda: 0.5 }
    }
}

enum Op {
    Leaf,
    Conv2d { input: NodeId, kernels: NodeId, cout: usize, geom: ConvGeom, cols: Vec<f32> },
    ChannelBias { input: NodeId, bias: NodeId, plane: usize },
    Pool { input: NodeId, geom: ConvGeom, mode: PoolMode, argmax: Vec<u32> },
    Dense { input: NodeId, weights: NodeId, bias: NodeId },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    Softmax { input: NodeId, row: usize },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f32 },
    MulConst { input: NodeId, factor: Vec<f32> },
    Reshape { input: NodeId },
    ZeroPad { input: NodeId, amount: usize },
    Sum { input: NodeId },
    Squash { input: NodeId, dim: usize },
    RowNorm { input: NodeId, dim: usize },
    CapsPredict { u: NodeId, w: NodeId },
    WeightedSum { c: NodeId, u_hat: NodeId },
    Agreement { u_hat: NodeId, v: NodeId },
    MarginLoss { lengths: NodeId, target: usize, params: MarginParams },
    SoftmaxCrossEntropy { logits: NodeId, probs: Vec<f32>, target: usize },
    Sse { input: NodeId, target: Vec<f32> },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f32>, inv_std: Vec<f32>, plane: usize },
    CapsLayout { input: NodeId, channels: usize, caps_dim: usize, hw: usize },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Parameters may be borrowed from the
/// model that owns them, so building a tape never copies weights.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.index()).and_then(Option::take)
    }
}

fn as_3d(t: &Tensor) -> Result<(usize, usize, usize)> {
    t.dims3()
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("rank >= 1")
}

fn squash_factor(norm: f64) -> (f64, f64) {
    // v = f(n)·s with f(n) = n / (1 + n²); returns (f, f'(n)/n).
    let n2 = norm * norm;
    let f = norm / (1.0 + n2);
    let df_over_n = if norm < 1e-8 { 0.0 } else { (1.0 - n2) / ((1.0 + n2) * (1.0 + n2) * norm) };
    (f, df_over_n)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.index()].requires_grad);
        let id = NodeId(u32::try_from(self.nodes.len()).expect("tape overflow"));
        self.nodes.push(Node { value, op, requires_grad });
        id
    }

    fn push_owned(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        self.push(Cow::Owned(value), op, parents)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = self.push_owned(value, Op::Leaf, &[]);
        self.nodes[id.index()].requires_grad = true;
        id
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_owned(value, Op::Leaf, &[])
    }

    /// Borrowed parameter; `trainable` controls whether gradients reach it.
    pub fn param(&mut self, value: &'a Tensor, trainable: bool) -> NodeId {
        let id = self.push(Cow::Borrowed(value), Op::Leaf, &[]);
        self.nodes[id.index()].requires_grad = trainable;
        id
    }

    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (cout, geom) = kernels::conv_geom(self.value(input), self.value(kernels), stride, padding)?;
        let (out, cols) = kernels::conv2d_raw(self.value(input).data(), self.value(kernels).data(), cout, &geom);
        let value = Tensor::from_parts(vec![cout, geom.oh, geom.ow], out);
        // The im2col buffer is only needed to form the kernel gradient.
        let cols = if self.requires_grad(kernels) { cols } else { Vec::new() };
        Ok(self.push_owned(value, Op::Conv2d { input, kernels, cout, geom, cols }, &[input, kernels]))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C, ...]` tensor.
    pub fn channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let c = x.shape()[0];
        if self.value(bias).len() != c {
            return Err(Error::dim(format!("bias has {} entries for {c} channels", self.value(bias).len())));
        }
        let plane = x.len() / c;
        let b = self.value(bias).data();
        let mut data = x.data().to_vec();
        for (ch, chunk) in data.chunks_exact_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[ch]);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push_owned(value, Op::ChannelBias { input, bias, plane }, &[input, bias]))
    }

    pub fn pool2d(&mut self, input: NodeId, window: usize, stride: usize, mode: PoolMode) -> Result<NodeId> {
        let geom = kernels::pool_geom(self.value(input), window, stride)?;
        let (out, argmax) = kernels::pool2d_raw(self.value(input).data(), &geom, mode);
        let value = Tensor::from_parts(vec![geom.c, geom.oh, geom.ow], out);
        Ok(self.push_owned(value, Op::Pool { input, geom, mode, argmax }, &[input]))
    }

    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = kernels::dense(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push_owned(value, Op::Dense { input, weights, bias }, &[input, weights, bias]))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = kernels::activation(self.value(input), kernels::Activation::Relu);
        self.push_owned(value, Op::Relu { input }, &[input])
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = kernels::activation(self.value(input), kernels::Activation::Sigmoid);
        self.push_owned(value, Op::Sigmoid { input }, &[input])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let row = last_dim(self.value(input));
        let value = kernels::activation(self.value(input), kernels::Activation::Softmax);
        self.push_owned(value, Op::Softmax { input, row }, &[input])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push_owned(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push_owned(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let x = self.value(input);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect());
        self.push_owned(value, Op::Scale { input, factor }, &[input])
    }

    /// Elementwise product with a constant (dropout masks, capsule masks).
    pub fn mul_const(&mut self, input: NodeId, factor: &Tensor) -> Result<NodeId> {
        let x = self.value(input);
        same_shape(x, factor, "mul_const")?;
        let data = x.data().iter().zip(factor.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push_owned(value, Op::MulConst { input, factor: factor.data().to_vec() }, &[input]))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input).reshape(shape)?;
        Ok(self.push_owned(value, Op::Reshape { input }, &[input]))
    }

    pub fn zero_pad(&mut self, input: NodeId, amount: usize) -> Result<NodeId> {
        let (c, h, w) = as_3d(self.value(input))?;
        let (ph, pw) = (h + 2 * amount, w + 2 * amount);
        let x = self.value(input).data();
        let mut out = vec![0.0f32; c * ph * pw];
        for ch in 0..c {
            for y in 0..h {
                let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
                let start = (ch * ph + y + amount) * pw + amount;
                out[start..start + w].copy_from_slice(src);
            }
        }
        let value = Tensor::from_parts(vec![c, ph, pw], out);
        Ok(self.push_owned(value, Op::ZeroPad { input, amount }, &[input]))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        self.push_owned(Tensor::scalar(total as f32), Op::Sum { input }, &[input])
    }

    /// Squash every row (last axis) to `‖s‖²/(1+‖s‖²) · s/‖s‖`.
    pub fn squash(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let dim = last_dim(x);
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(dim) {
            let norm = kernels::dot(row, row).sqrt();
            let (f, _) = squash_factor(norm);
            data.extend(row.iter().map(|&v| (v as f64 * f) as f32));
        }
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.push_owned(value, Op::Squash { input, dim }, &[input])
    }

    /// Euclidean norm of every row (last axis); drops that axis.
    pub fn row_norm(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let dim = last_dim(x);
        let data: Vec<f32> = x.data().chunks_exact(dim).map(|r| kernels::dot(r, r).sqrt() as f32).collect();
        let shape = if x.rank() > 1 { x.shape()[..x.rank() - 1].to_vec() } else { vec![1] };
        let value = Tensor::from_parts(shape, data);
        self.push_owned(value, Op::RowNorm { input, dim }, &[input])
    }

    /// Prediction vectors `û[i,j] = W[i,j]·u[i]` for `u: [Nin, Din]` and
    /// `W: [Nin, Nout, Dout, Din]`; the result is `[Nin, Nout, Dout]`.
    pub fn caps_predict(&mut self, u: NodeId, w: NodeId) -> Result<NodeId> {
        let (uv, wv) = (self.value(u), self.value(w));
        let [n_in, d_in] = *uv.shape() else {
            return Err(Error::dim(format!("capsules must be [N, D], got {:?}", uv.shape())));
        };
        let [wn, n_out, d_out, wd] = *wv.shape() else {
            return Err(Error::dim(format!("transforms must be [Nin, Nout, Dout, Din], got {:?}", wv.shape())));
        };
        if wn != n_in || wd != d_in {
            return Err(Error::dim(format!(
                "transforms {:?} do not match capsules {:?}",
                wv.shape(),
                uv.shape()
            )));
        }
        let (ud, wdata) = (uv.data(), wv.data());
        let mut out = vec![0.0f32; n_in * n_out * d_out];
        for i in 0..n_in {
            let ui = &ud[i * d_in..(i + 1) * d_in];
            for j in 0..n_out {
                for a in 0..d_out {
                    let row = ((i * n_out + j) * d_out + a) * d_in;
                    out[(i * n_out + j) * d_out + a] = kernels::dot(&wdata[row..row + d_in], ui) as f32;
                }
            }
        }
        let value = Tensor::from_parts(vec![n_in, n_out, d_out], out);
        Ok(self.push_owned(value, Op::CapsPredict { u, w }, &[u, w]))
    }

    /// `s[j] = Σ_i c[i,j]·û[i,j]` for couplings `[Nin, Nout]`.
    pub fn weighted_sum(&mut self, c: NodeId, u_hat: NodeId) -> Result<NodeId> {
        let (n_in, n_out, dim) = self.routing_dims(u_hat)?;
        if self.value(c).shape() != [n_in, n_out] {
            return Err(Error::dim(format!("couplings {:?} vs predictions {:?}", self.value(c).shape(), [n_in, n_out])));
        }
        let (cv, uv) = (self.value(c).data(), self.value(u_hat).data());
        let mut acc = vec![0.0f64; n_out * dim];
        for i in 0..n_in {
            for j in 0..n_out {
                let cij = cv[i * n_out + j] as f64;
                let base = (i * n_out + j) * dim;
                for d in 0..dim {
                    acc[j * dim + d] += cij * uv[base + d] as f64;
                }
            }
        }
        let value = Tensor::from_parts(vec![n_out, dim], acc.into_iter().map(|v| v as f32).collect());
        Ok(self.push_owned(value, Op::WeightedSum { c, u_hat }, &[c, u_hat]))
    }

    /// Agreement `a[i,j] = û[i,j]·v[j]`.
    pub fn agreement(&mut self, u_hat: NodeId, v: NodeId) -> Result<NodeId> {
        let (n_in, n_out, dim) = self.routing_dims(u_hat)?;
        if self.value(v).shape() != [n_out, dim] {
            return Err(Error::dim(format!("outputs {:?} vs predictions", self.value(v).shape())));
        }
        let (uv, vv) = (self.value(u_hat).data(), self.value(v).data());
        let mut out = Vec::with_capacity(n_in * n_out);
        for i in 0..n_in {
            for j in 0..n_out {
                let base = (i * n_out + j) * dim;
                out.push(kernels::dot(&uv[base..base + dim], &vv[j * dim..(j + 1) * dim]) as f32);
            }
        }
        let value = Tensor::from_parts(vec![n_in, n_out], out);
        Ok(self.push_owned(value, Op::Agreement { u_hat, v }, &[u_hat, v]))
    }

    fn routing_dims(&self, u_hat: NodeId) -> Result<(usize, usize, usize)> {
        match *self.value(u_hat).shape() {
            [a, b, c] => Ok((a, b, c)),
            ref s => Err(Error::dim(format!("predictions must be [Nin, Nout, D], got {s:?}"))),
        }
    }

    /// `Σ_k T_k·max(0, m⁺−l_k)² + λ·(1−T_k)·max(0, l_k−m⁻)²`.
    pub fn margin_loss(&mut self, lengths: NodeId, target: usize, params: MarginParams) -> Result<NodeId> {
        let l = self.value(lengths).data();
        if target >= l.len() {
            return Err(Error::contract(format!("target class {target} out of range for {} capsules", l.len())));
        }
        let total: f64 = l
            .iter()
            .enumerate()
            .map(|(k, &len)| {
                let len = len as f64;
                if k == target {
                    (params.m_plus as f64 - len).max(0.0).powi(2)
                } else {
                    params.lambda as f64 * (len - params.m_minus as f64).max(0.0).powi(2)
                }
            })
            .sum();
        Ok(self.push_owned(Tensor::scalar(total as f32), Op::MarginLoss { lengths, target, params }, &[lengths]))
    }

    /// `−ln softmax(z)[target]`, computed with the log-sum-exp shift.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let z = self.value(logits).data();
        if target >= z.len() {
            return Err(Error::contract(format!("target class {target} out of range for {} logits", z.len())));
        }
        let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = z.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
        let loss = lse - z[target] as f64;
        let probs = z.iter().map(|&v| (v as f64 - lse).exp() as f32).collect();
        Ok(self.push_owned(
            Tensor::scalar(loss as f32),
            Op::SoftmaxCrossEntropy { logits, probs, target },
            &[logits],
        ))
    }

    /// Sum of squared differences against a constant target.
    pub fn sse(&mut self, input: NodeId, target: &Tensor) -> Result<NodeId> {
        let x = self.value(input);
        if x.len() != target.len() {
            return Err(Error::dim(format!("reconstruction has {} values, target {}", x.len(), target.len())));
        }
        let total: f64 = x.data().iter().zip(target.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        Ok(self.push_owned(Tensor::scalar(total as f32), Op::Sse { input, target: target.data().to_vec() }, &[input]))
    }

    /// Inference-mode batch normalization with fixed statistics; `gamma` and
    /// `beta` stay differentiable. Channels are the leading axis.
    pub fn batch_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, mean: &[f32], var: &[f32], eps: f32) -> Result<NodeId> {
        let x = self.value(input);
        let c = x.shape()[0];
        if [self.value(gamma).len(), self.value(beta).len(), mean.len(), var.len()].iter().any(|&n| n != c) {
            return Err(Error::dim(format!("batch-norm statistics must have {c} entries")));
        }
        let plane = x.len() / c;
        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / ((v as f64 + eps as f64).sqrt())) as f32).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = Vec::with_capacity(x.len());
        for (ch, chunk) in x.data().chunks_exact(plane).enumerate() {
            data.extend(chunk.iter().map(|&v| g[ch] * (v - mean[ch]) * inv_std[ch] + b[ch]));
        }
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let op = Op::BatchNorm { input, gamma, beta, mean: mean.to_vec(), inv_std, plane };
        Ok(self.push_owned(value, op, &[input, gamma, beta]))
    }

    /// Regroups a `[channels·caps_dim, H, W]` map into `[channels·H·W, caps_dim]`
    /// capsules: capsule `(ch, y, x)` collects channels `ch·caps_dim .. +caps_dim`.
    pub fn caps_layout(&mut self, input: NodeId, channels: usize, caps_dim: usize) -> Result<NodeId> {
        let (c, h, w) = as_3d(self.value(input))?;
        if c != channels * caps_dim {
            return Err(Error::dim(format!("{c} feature channels cannot form {channels} capsule channels of dimension {caps_dim}")));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = vec![0.0f32; x.len()];
        for ch in 0..channels {
            for d in 0..caps_dim {
                for p in 0..hw {
                    out[(ch * hw + p) * caps_dim + d] = x[(ch * caps_dim + d) * hw + p];
                }
            }
        }
        let value = Tensor::from_parts(vec![channels * hw, caps_dim], out);
        Ok(self.push_owned(value, Op::CapsLayout { input, channels, caps_dim, hw }, &[input]))
    }

    /// Reverse sweep from a scalar `loss`; returns the gradient of every node
    /// that lies on a path from a differentiable leaf. Differentiable leaves
    /// that the loss does not depend on get all-zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        self.backprop(loss, 1.0, &mut grads, true)?;
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && slot.is_none() {
                *slot = Some(node.value.zeros_like());
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds `scale · d(loss)/d(leaf)` into caller-owned accumulators.
    pub fn backward_into(&self, loss: NodeId, scale: f32, sinks: &mut [(NodeId, &mut Tensor)]) -> Result<()> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, acc) in sinks.iter_mut() {
            if acc.shape() != self.value(*id).shape() {
                return Err(Error::dim(format!("accumulator shape {:?} for node {:?}", acc.shape(), self.value(*id).shape())));
            }
            grads[id.index()] = Some(std::mem::replace(*acc, Tensor::scalar(0.0)));
        }
        let result = self.backprop(loss, scale, &mut grads, false);
        for (id, acc) in sinks.iter_mut() {
            **acc = grads[id.index()].take().expect("accumulator slot is never consumed");
        }
        result
    }

    fn backprop(&self, loss: NodeId, scale: f32, grads: &mut [Option<Tensor>], keep: bool) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!("loss must be scalar, got shape {:?}", self.value(loss).shape())));
        }
        let seed = Tensor::scalar(scale);
        match &mut grads[loss.index()] {
            Some(g) => g.data_mut()[0] += scale,
            slot => *slot = Some(seed),
        }
        for idx in (0..=loss.index()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, g.data(), grads);
            if keep {
                grads[idx] = Some(g);
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], id: NodeId) -> Option<&'g mut [f32]> {
        let node = &self.nodes[id.index()];
        if !node.requires_grad {
            return None;
        }
        let slot = &mut grads[id.index()];
        Some(slot.get_or_insert_with(|| node.value.zeros_like()).data_mut())
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f32], grads: &mut [Option<Tensor>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernels, cout, geom, cols } => {
                let ncols = geom.col_cols();
                let rows = geom.col_rows();
                if let Some(dk) = self.slot(grads, *kernels) {
                    gemm(*cout, ncols, rows, g, false, cols, true, 1.0, dk);
                }
                if self.requires_grad(*input) {
                    let k = self.value(*kernels).data();
                    let mut dcols = vec![0.0f32; rows * ncols];
                    gemm(rows, *cout, ncols, k, true, g, false, 0.0, &mut dcols);
                    let dx = self.slot(grads, *input).expect("checked requires_grad");
                    col2im_add(&dcols, geom, dx);
                }
            }
            Op::ChannelBias { input, bias, plane } => {
                if let Some(dx) = self.slot(grads, *input) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for (ch, chunk) in g.chunks_exact(*plane).enumerate() {
                        db[ch] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
                    }
                }
            }
            Op::Pool { input, geom, mode, argmax } => {
                let Some(dx) = self.slot(grads, *input) else { return };
                match mode {
                    PoolMode::Max => {
                        for (gi, &src) in g.iter().zip(argmax) {
                            dx[src as usize] += gi;
                        }
                    }
                    PoolMode::Avg => {
                        let inv = 1.0 / (geom.kh * geom.kw) as f32;
                        let mut o = 0;
                        for ci in 0..geom.c {
                            let base = ci * geom.h * geom.w;
                            for oy in 0..geom.oh {
                                for ox in 0..geom.ow {
                                    let share = g[o] * inv;
                                    o += 1;
                                    for yy in oy * geom.stride..oy * geom.stride + geom.kh {
                                        for xx in ox * geom.stride..ox * geom.stride + geom.kw {
                                            dx[base + yy * geom.w + xx] += share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Dense { input, weights, bias } => {
                let x = self.value(*input).data();
                let w = self.value(*weights).data();
                let n = x.len();
                if let Some(dw) = self.slot(grads, *weights) {
                    for (row, &gm) in dw.chunks_exact_mut(n).zip(g) {
                        if gm != 0.0 {
                            row.iter_mut().zip(x).for_each(|(d, &xv)| *d += gm * xv);
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *input) {
                    for (row, &gm) in w.chunks_exact(n).zip(g) {
                        if gm != 0.0 {
                            dx.iter_mut().zip(row).for_each(|(d, &wv)| *d += gm * wv);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    add_into(db, g);
                }
            }
            Op::Relu { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        if yv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Softmax { input, row } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for ((dr, gr), yr) in dx.chunks_exact_mut(*row).zip(g.chunks_exact(*row)).zip(y.chunks_exact(*row)) {
                        let inner = kernels::dot(gr, yr);
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += ((gv as f64 - inner) * yv as f64) as f32;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &o) in da.iter_mut().zip(g).zip(vb) {
                        *d += gv * o;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gv), &o) in db.iter_mut().zip(g).zip(va) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(dx) = self.slot(grads, *input) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * factor);
                }
            }
            Op::MulConst { input, factor } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(factor) {
                        *d += gv * m;
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    add_into(dx, g);
                }
            }
            Op::ZeroPad { input, amount } => {
                let (c, h, w) = self.value(*input).dims3().expect("validated at record time");
                let (ph, pw) = (h + 2 * amount, w + 2 * amount);
                if let Some(dx) = self.slot(grads, *input) {
                    for ch in 0..c {
                        for yy in 0..h {
                            let start = (ch * ph + yy + amount) * pw + amount;
                            add_into(&mut dx[(ch * h + yy) * w..(ch * h + yy + 1) * w], &g[start..start + w]);
                        }
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Squash { input, dim } => {
                let s = self.value(*input).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for ((dr, gr), sr) in dx.chunks_exact_mut(*dim).zip(g.chunks_exact(*dim)).zip(s.chunks_exact(*dim)) {
                        let norm = kernels::dot(sr, sr).sqrt();
                        let (f, df_over_n) = squash_factor(norm);
                        let sg = kernels::dot(sr, gr);
                        for ((d, &gv), &sv) in dr.iter_mut().zip(gr).zip(sr) {
                            *d += (f * gv as f64 + df_over_n * sg * sv as f64) as f32;
                        }
                    }
                }
            }
            Op::RowNorm { input, dim } => {
                let x = self.value(*input).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for (r, (dr, xr)) in dx.chunks_exact_mut(*dim).zip(x.chunks_exact(*dim)).enumerate() {
                        let norm = y[r];
                        if norm < 1e-8 {
                            continue;
                        }
                        let k = g[r] / norm;
                        dr.iter_mut().zip(xr).for_each(|(d, &xv)| *d += k * xv);
                    }
                }
            }
            Op::CapsPredict { u, w } => {
                let (uv, wv) = (self.value(*u), self.value(*w));
                let [n_in, d_in] = *uv.shape() else { unreachable!() };
                let [_, n_out, d_out, _] = *wv.shape() else { unreachable!() };
                let (ud, wd) = (uv.data(), wv.data());
                if let Some(dw) = self.slot(grads, *w) {
                    for i in 0..n_in {
                        let ui = &ud[i * d_in..(i + 1) * d_in];
                        for ja in 0..n_out * d_out {
                            let gv = g[i * n_out * d_out + ja];
                            let row = (i * n_out * d_out + ja) * d_in;
                            dw[row..row + d_in].iter_mut().zip(ui).for_each(|(d, &x)| *d += gv * x);
                        }
                    }
                }
                if let Some(du) = self.slot(grads, *u) {
                    for i in 0..n_in {
                        let dui = &mut du[i * d_in..(i + 1) * d_in];
                        for ja in 0..n_out * d_out {
                            let gv = g[i * n_out * d_out + ja];
                            let row = (i * n_out * d_out + ja) * d_in;
                            dui.iter_mut().zip(&wd[row..row + d_in]).for_each(|(d, &x)| *d += gv * x);
                        }
                    }
                }
            }
            Op::WeightedSum { c, u_hat } => {
                let (n_in, n_out, dim) = self.routing_dims(*u_hat).expect("validated");
                let (cv, uv) = (self.value(*c).data(), self.value(*u_hat).data());
                if let Some(dc) = self.slot(grads, *c) {
                    for i in 0..n_in {
                        for j in 0..n_out {
                            let base = (i * n_out + j) * dim;
                            dc[i * n_out + j] += kernels::dot(&g[j * dim..(j + 1) * dim], &uv[base..base + dim]) as f32;
                        }
                    }
                }
                if let Some(du) = self.slot(grads, *u_hat) {
                    for i in 0..n_in {
                        for j in 0..n_out {
                            let cij = cv[i * n_out + j];
                            let base = (i * n_out + j) * dim;
                            for d in 0..dim {
                                du[base + d] += cij * g[j * dim + d];
                            }
                        }
                    }
                }
            }
            Op::Agreement { u_hat, v } => {
                let (n_in, n_out, dim) = self.routing_dims(*u_hat).expect("validated");
                let (uv, vv) = (self.value(*u_hat).data(), self.value(*v).data());
                if let Some(du) = self.slot(grads, *u_hat) {
                    for i in 0..n_in {
                        for j in 0..n_out {
                            let gv = g[i * n_out + j];
                            let base = (i * n_out + j) * dim;
                            for d in 0..dim {
                                du[base + d] += gv * vv[j * dim + d];
                            }
                        }
                    }
                }
                if let Some(dv) = self.slot(grads, *v) {
                    let mut acc = vec![0.0f64; n_out * dim];
                    for i in 0..n_in {
                        for j in 0..n_out {
                            let gv = g[i * n_out + j] as f64;
                            let base = (i * n_out + j) * dim;
                            for d in 0..dim {
                                acc[j * dim + d] += gv * uv[base + d] as f64;
                            }
                        }
                    }
                    dv.iter_mut().zip(acc).for_each(|(d, a)| *d += a as f32);
                }
            }
            Op::MarginLoss { lengths, target, params } => {
                let l = self.value(*lengths).data();
                if let Some(dl) = self.slot(grads, *lengths) {
                    for (k, (d, &len)) in dl.iter_mut().zip(l).enumerate() {
                        let deriv = if k == *target {
                            -2.0 * (params.m_plus - len).max(0.0)
                        } else {
                            2.0 * params.lambda * (len - params.m_minus).max(0.0)
                        };
                        *d += g[0] * deriv;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, target } => {
                if let Some(dz) = self.slot(grads, *logits) {
                    for (k, (d, &p)) in dz.iter_mut().zip(probs).enumerate() {
                        let t = if k == *target { 1.0 } else { 0.0 };
                        *d += g[0] * (p - t);
                    }
                }
            }
            Op::Sse { input, target } => {
                let x = self.value(*input).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &xv), &tv) in dx.iter_mut().zip(x).zip(target) {
                        *d += 2.0 * g[0] * (xv - tv);
                    }
                }
            }
            Op::BatchNorm { input, gamma, beta, mean, inv_std, plane } => {
                let x = self.value(*input).data();
                let gm = self.value(*gamma).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for (ch, (dr, gr)) in dx.chunks_exact_mut(*plane).zip(g.chunks_exact(*plane)).enumerate() {
                        let k = gm[ch] * inv_std[ch];
                        dr.iter_mut().zip(gr).for_each(|(d, &gv)| *d += gv * k);
                    }
                }
                if let Some(dgm) = self.slot(grads, *gamma) {
                    for (ch, (xr, gr)) in x.chunks_exact(*plane).zip(g.chunks_exact(*plane)).enumerate() {
                        let s: f64 = xr.iter().zip(gr).map(|(&xv, &gv)| ((xv - mean[ch]) * inv_std[ch] * gv) as f64).sum();
                        dgm[ch] += s as f32;
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for (ch, gr) in g.chunks_exact(*plane).enumerate() {
                        db[ch] += gr.iter().map(|&v| v as f64).sum::<f64>() as f32;
                    }
                }
            }
            Op::CapsLayout { input, channels, caps_dim, hw } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for ch in 0..*channels {
                        for d in 0..*caps_dim {
                            for p in 0..*hw {
                                dx[(ch * caps_dim + d) * hw + p] += g[(ch * hw + p) * caps_dim + d];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -3.0]).unwrap());
        let c = tape.constant(Tensor::vector(vec![5.0, 6.0]).unwrap());
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]).unwrap());
        let a = tape.scale(x, 2.0);
        let b = tape.add(a, x).unwrap();
        let loss = tape.sum(b);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn max_pool_routes_to_first_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![4.0, 4.0, 1.0, 2.0]).unwrap());
        let p = tape.pool2d(x, 2, 2, PoolMode::Max).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_into_accumulates_across_tapes() {
        let w = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut acc = Tensor::zeros(vec![2]).unwrap();
        for _ in 0..3 {
            let mut tape = Tape::new();
            let p = tape.param(&w, true);
            let sq = tape.mul(p, p).unwrap();
            let loss = tape.sum(sq);
            tape.backward_into(loss, 0.5, &mut [(p, &mut acc)]).unwrap();
        }
        assert_eq!(acc.data(), &[3.0, 6.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let w = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&w, false);
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let m = tape.mul(p, x).unwrap();
        let loss = tape.sum(m);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(p).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn caps_layout_groups_channels() {
        let mut tape = Tape::new();
        // 2 capsule channels of dim 2 over a 1x2 grid.
        let x = tape.constant(Tensor::new(vec![4, 1, 2], (0..8).map(|v| v as f32).collect()).unwrap());
        let caps = tape.caps_layout(x, 2, 2).unwrap();
        assert_eq!(tape.value(caps).shape(), &[4, 2]);
        assert_eq!(tape.value(caps).data(), &[0.0, 2.0, 1.0, 3.0, 4.0, 6.0, 5.0, 7.0]);
    }
}
