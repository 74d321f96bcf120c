//! Pure forward kernels shared by the tape, the model executor and the
//! spiking compiler.
//!
//! Convolution is cross-correlation lowered to im2col + GEMM. Output sizes use
//! floor semantics: `(H + 2·pad − k) / stride + 1`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Softmax,
    Sigmoid,
}

/// Geometry of one 2-D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        (c, h, w): (usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim("stride must be at least 1"));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {pad}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { c, h, w, kh, kw, stride, pad, oh, ow })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `input` (`[C, H, W]`, row-major) into a `[C·kh·kw, oh·ow]` matrix.
pub(crate) fn im2col(input: &[f32], g: &ConvGeom) -> Vec<f32> {
    let ncols = g.col_cols();
    let mut cols = vec![0.0f32; g.col_rows() * ncols];
    let pad = g.pad as isize;
    for ci in 0..g.c {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            *o = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let ncols = g.col_cols();
    let pad = g.pad as isize;
    for ci in 0..g.c {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` for row-major matrices, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made with these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dot product accumulated in `f64`.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            lanes[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x as f64 * *y as f64;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub(crate) fn conv2d_raw(input: &[f32], kernels: &[f32], cout: usize, g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let cols = im2col(input, g);
    let mut out = vec![0.0f32; cout * g.col_cols()];
    gemm(cout, g.col_rows(), g.col_cols(), kernels, false, &cols, false, 0.0, &mut out);
    (out, cols)
}

pub(crate) fn conv_geom(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<(usize, ConvGeom)> {
    let (c, h, w) = input.dims3()?;
    let [cout, cin, kh, kw] = *kernels.shape() else {
        return Err(Error::dim(format!("kernels must be [Cout, Cin, kH, kW], got {:?}", kernels.shape())));
    };
    if cin != c {
        return Err(Error::dim(format!("input has {c} channels but kernels expect {cin}")));
    }
    Ok((cout, ConvGeom::new((c, h, w), (kh, kw), stride, padding)?))
}

/// 2-D cross-correlation of `[Cin, H, W]` with `[Cout, Cin, kH, kW]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (cout, g) = conv_geom(input, kernels, stride, padding)?;
    let (out, _) = conv2d_raw(input.data(), kernels.data(), cout, &g);
    Ok(Tensor::from_parts(vec![cout, g.oh, g.ow], out))
}

pub(crate) fn pool_geom(input: &Tensor, window: usize, stride: usize) -> Result<ConvGeom> {
    let (c, h, w) = input.dims3()?;
    if window == 0 || window > h || window > w {
        return Err(Error::dim(format!("pool window {window} larger than input {h}x{w}")));
    }
    ConvGeom::new((c, h, w), (window, window), stride, 0)
}

/// Windowed reduction. Returns the output and, for max mode, the flat input
/// index chosen for every output element (first maximum in row-major order).
pub(crate) fn pool2d_raw(input: &[f32], g: &ConvGeom, mode: PoolMode) -> (Vec<f32>, Vec<u32>) {
    let mut out = Vec::with_capacity(g.c * g.oh * g.ow);
    let mut arg = Vec::new();
    let inv = 1.0 / (g.kh * g.kw) as f64;
    for ci in 0..g.c {
        let base = ci * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, x0) = (oy * g.stride, ox * g.stride);
                match mode {
                    PoolMode::Avg => {
                        let mut acc = 0.0f64;
                        for y in y0..y0 + g.kh {
                            for x in x0..x0 + g.kw {
                                acc += input[base + y * g.w + x] as f64;
                            }
                        }
                        out.push((acc * inv) as f32);
                    }
                    PoolMode::Max => {
                        let mut best = base + y0 * g.w + x0;
                        for y in y0..y0 + g.kh {
                            for x in x0..x0 + g.kw {
                                let idx = base + y * g.w + x;
                                if input[idx] > input[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(input[best]);
                        arg.push(best as u32);
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn pool2d(input: &Tensor, window: usize, stride: usize, mode: PoolMode) -> Result<Tensor> {
    let g = pool_geom(input, window, stride)?;
    let (out, _) = pool2d_raw(input.data(), &g, mode);
    Ok(Tensor::from_parts(vec![g.c, g.oh, g.ow], out))
}

pub(crate) fn dense_raw(x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let n = x.len();
    w.chunks_exact(n).zip(b).map(|(row, bias)| (dot(row, x) + *bias as f64) as f32).collect()
}

/// `W·x + b` for `x` of length N, `W` of shape `[M, N]` and `b` of length M.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [m, n] = *weights.shape() else {
        return Err(Error::dim(format!("dense weights must be [M, N], got {:?}", weights.shape())));
    };
    if input.len() != n {
        return Err(Error::dim(format!("dense expects {n} inputs, got {}", input.len())));
    }
    if bias.len() != m {
        return Err(Error::dim(format!("dense bias must have {m} entries, got {}", bias.len())));
    }
    Ok(Tensor::from_parts(vec![m], dense_raw(input.data(), weights.data(), bias.data())))
}

pub(crate) fn softmax_rows(data: &[f32], row: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks_exact(row) {
        let max = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = chunk.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    out
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Elementwise or row-wise nonlinearity. Softmax works over the last axis and
/// subtracts the row maximum before exponentiating.
pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    let data = match kind {
        Activation::Relu => input.data().iter().map(|v| v.max(0.0)).collect(),
        Activation::Sigmoid => input.data().iter().map(|&v| sigmoid(v)).collect(),
        Activation::Softmax => {
            let row = *input.shape().last().expect("tensor rank is at least 1");
            softmax_rows(input.data(), row)
        }
    };
    Tensor::from_parts(input.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Direct nested-loop cross-correlation used as the reference.
    fn conv_direct(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        let [co, _, kh, kw] = *k.shape() else { unreachable!() };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f32; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[(ci * h + iy as usize) * w + ix as usize] as f64
                                        * k.data()[((o * c + ci) * kh + ki) * kw + kj] as f64;
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        t(&[co, oh, ow], out)
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let x = Tensor::full(vec![1, 5, 5], 1.0).unwrap();
        let k = Tensor::full(vec![1, 1, 3, 3], 1.0).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 3, 4], (0..12).map(|v| v as f32 * 0.5 - 2.0).collect());
        let k = Tensor::full(vec![1, 1, 1, 1], 1.0).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), x.data());
    }

    #[test]
    fn one_hot_kernel_selects_channel() {
        let x = t(&[3, 2, 2], (0..12).map(|v| v as f32).collect());
        let k = t(&[1, 3, 1, 1], vec![0.0, 1.0, 0.0]);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &x.data()[4..8]);
    }

    #[test]
    fn capsule_input_geometry() {
        let x = Tensor::zeros(vec![1, 28, 28]).unwrap();
        let k = Tensor::zeros(vec![256, 1, 9, 9]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().shape(), &[256, 20, 20]);
        let g = ConvGeom::new((256, 20, 20), (9, 9), 2, 0).unwrap();
        assert_eq!((g.oh, g.ow), (6, 6));
    }

    #[test]
    fn conv_matches_direct_sum_with_stride_and_padding() {
        let x = t(&[2, 7, 6], (0..84).map(|v| ((v * 37) % 11) as f32 / 7.0 - 0.6).collect());
        let k = t(&[3, 2, 3, 2], (0..36).map(|v| ((v * 13) % 7) as f32 / 5.0 - 0.5).collect());
        for (stride, pad) in [(1, 0), (2, 1), (3, 2)] {
            let fast = conv2d(&x, &k, stride, pad).unwrap();
            let slow = conv_direct(&x, &k, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-5);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(vec![2, 4, 4]).unwrap();
        let k = Tensor::zeros(vec![1, 3, 3, 3]).unwrap();
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::Dimension(_))));
        let big = Tensor::zeros(vec![1, 2, 5, 5]).unwrap();
        assert!(conv2d(&x, &big, 1, 0).is_err());
    }

    #[test]
    fn pool_small_cases() {
        let x = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool2d(&x, 2, 2, PoolMode::Avg).unwrap().data(), &[2.5]);
        assert_eq!(pool2d(&x, 2, 2, PoolMode::Max).unwrap().data(), &[4.0]);
        let c = Tensor::full(vec![2, 4, 4], 0.7).unwrap();
        let p = pool2d(&c, 2, 2, PoolMode::Avg).unwrap();
        assert_eq!(p.shape(), &[2, 2, 2]);
        assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
        assert!(pool2d(&x, 3, 1, PoolMode::Avg).is_err());
    }

    #[test]
    fn dense_examples() {
        let w = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let x = t(&[2], vec![1.0, 1.0]);
        let b = t(&[2], vec![0.0, 1.0]);
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[3.0, 8.0]);
        let long = Tensor::zeros(vec![64]).unwrap();
        let w3 = Tensor::zeros(vec![3, 64]).unwrap();
        assert_eq!(dense(&long, &w3, &Tensor::zeros(vec![3]).unwrap()).unwrap().len(), 3);
        assert!(dense(&x, &w3, &b).is_err());
    }

    #[test]
    fn activations() {
        let r = activation(&t(&[2], vec![-1.0, 2.0]), Activation::Relu);
        assert_eq!(r.data(), &[0.0, 2.0]);
        let s = activation(&t(&[3], vec![0.0; 3]), Activation::Softmax);
        assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));
        let s = activation(&t(&[2], vec![2f32.ln(), 0.0]), Activation::Softmax);
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-6);
        let big = activation(&t(&[2, 2], vec![1000.0, 0.0, -1000.0, -1000.0]), Activation::Softmax);
        assert!(big.is_finite());
        assert_eq!(big.data()[0], 1.0);
        assert_eq!(big.data()[2], 0.5);
    }
}
