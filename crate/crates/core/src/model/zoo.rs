//! Ready-made architectures.

use super::{LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::pca::Pca;
use crate::tensor::Tensor;

/// Default dropout rate for the two extra dropout layers of the capsule model.
pub const CAPS_DROPOUT: f32 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct CapsNetConfig {
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub primary_channels: usize,
    pub primary_dim: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub class_dim: usize,
    pub routing_iters: usize,
    pub dropout: f32,
    /// Hidden decoder widths; empty disables the decoder.
    pub decoder: Vec<usize>,
}

impl Default for CapsNetConfig {
    fn default() -> Self {
        CapsNetConfig {
            conv_filters: 256,
            conv_kernel: 9,
            primary_channels: 32,
            primary_dim: 8,
            primary_kernel: 9,
            primary_stride: 2,
            class_dim: 16,
            routing_iters: 3,
            dropout: CAPS_DROPOUT,
            decoder: vec![512, 1024],
        }
    }
}

/// Conv → ReLU → Dropout → PrimaryCaps → Dropout → ClassCaps, followed by the
/// reconstruction decoder when `cfg.decoder` is nonempty.
pub fn capsnet(input: [usize; 3], classes: usize, cfg: &CapsNetConfig, seed: u64) -> Result<ModelGraph> {
    let mut layers = vec![
        LayerSpec::Conv2D { filters: cfg.conv_filters, kernel: cfg.conv_kernel, stride: 1, padding: 0 },
        LayerSpec::ReLU,
    ];
    if cfg.dropout > 0.0 {
        layers.push(LayerSpec::Dropout { rate: cfg.dropout });
    }
    layers.push(LayerSpec::PrimaryCaps {
        channels: cfg.primary_channels,
        caps_dim: cfg.primary_dim,
        kernel: cfg.primary_kernel,
        stride: cfg.primary_stride,
    });
    if cfg.dropout > 0.0 {
        layers.push(LayerSpec::Dropout { rate: cfg.dropout });
    }
    layers.push(LayerSpec::ClassCaps { num_caps: classes, caps_dim: cfg.class_dim, routing_iters: cfg.routing_iters });
    if !cfg.decoder.is_empty() {
        for &units in &cfg.decoder {
            layers.push(LayerSpec::DecoderDense { units });
        }
        layers.push(LayerSpec::DecoderDense { units: input.iter().product() });
    }
    ModelGraph::new(input, classes, layers, seed)
}

/// Small conversion-friendly CNN: two conv/ReLU/avg-pool stages and a dense head.
pub fn toy_cnn(input: [usize; 3], classes: usize, seed: u64) -> Result<ModelGraph> {
    let layers = vec![
        LayerSpec::Conv2D { filters: 8, kernel: 5, stride: 1, padding: 0 },
        LayerSpec::ReLU,
        LayerSpec::AvgPool { window: 2, stride: 2 },
        LayerSpec::Conv2D { filters: 16, kernel: 5, stride: 1, padding: 0 },
        LayerSpec::ReLU,
        LayerSpec::AvgPool { window: 2, stride: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: classes },
        LayerSpec::Softmax,
    ];
    ModelGraph::new(input, classes, layers, seed)
}

/// Residual toy: a stem conv, `blocks` two-conv blocks with identity skips,
/// average pooling and a dense head. Index of the head layer is `len − 2`.
pub fn residual(input: [usize; 3], classes: usize, blocks: usize, filters: usize, seed: u64) -> Result<ModelGraph> {
    if blocks == 0 || blocks > 10 {
        return Err(Error::contract(format!("residual toy supports 1..=10 blocks, got {blocks}")));
    }
    let conv = LayerSpec::Conv2D { filters, kernel: 3, stride: 1, padding: 1 };
    let mut layers = vec![conv.clone(), LayerSpec::ReLU];
    for _ in 0..blocks {
        let block_input = layers.len() - 1;
        layers.extend([
            conv.clone(),
            LayerSpec::ReLU,
            conv.clone(),
            LayerSpec::Add { source: block_input },
            LayerSpec::ReLU,
        ]);
    }
    layers.extend([
        LayerSpec::AvgPool { window: 2, stride: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: classes },
        LayerSpec::Softmax,
    ]);
    ModelGraph::new(input, classes, layers, seed)
}

/// Fully connected classifier. With `pca`, layer 1 is a fixed projection
/// onto the principal components (weights = components, bias = −components·mean)
/// and should be frozen during training.
pub fn dense_mlp(input: [usize; 3], hidden: &[usize], classes: usize, dropout: f32, pca: Option<&Pca>, seed: u64) -> Result<ModelGraph> {
    let mut layers = vec![LayerSpec::Flatten];
    if let Some(p) = pca {
        layers.push(LayerSpec::Dense { units: p.components().shape()[0] });
    }
    for &units in hidden {
        layers.push(LayerSpec::Dense { units });
        layers.push(LayerSpec::ReLU);
        if dropout > 0.0 {
            layers.push(LayerSpec::Dropout { rate: dropout });
        }
    }
    layers.push(LayerSpec::Dense { units: classes });
    layers.push(LayerSpec::Softmax);
    let mut model = ModelGraph::new(input, classes, layers, seed)?;
    if let Some(p) = pca {
        let comps = p.components();
        let [k, d] = *comps.shape() else { unreachable!("components are [k, D]") };
        if d != input.iter().product::<usize>() {
            return Err(Error::dim(format!("PCA fitted on {d} features, images have {}", input.iter().product::<usize>())));
        }
        let bias: Vec<f32> = comps
            .data()
            .chunks_exact(d)
            .map(|row| -(crate::tensor::kernels::dot(row, p.mean())) as f32)
            .collect();
        model.set_param("1.dense.weight", comps.clone())?;
        model.set_param("1.dense.bias", Tensor::new(vec![k], bias)?)?;
    }
    Ok(model)
}
