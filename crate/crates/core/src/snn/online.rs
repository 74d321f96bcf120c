//! Single-layer on-line learning with Poisson inputs and a local delta rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::{Encoding, SpikingLayer, SpikingNetwork};
use super::sim::{step, NeuronPopulation, SimConfig};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};

/// Rate target of the labelled output neuron; all others aim for silence.
pub const TARGET_RATE: f64 = 1.0;

/// Trains a pixels→classes layer presentation by presentation. After each
/// image, `Δw[j,i] = eta·(target_j − rate_j)·pre_i` where rates and the
/// presynaptic trace are spike counts divided by `T`. Weights start at zero;
/// presentation `i` of epoch `e` draws from stream `(e << 32) | i` of `cfg.seed`.
pub fn train_single_layer_online(stream: &LabeledImageSet, cfg: &SimConfig, eta: f64, epochs: usize) -> Result<SpikingNetwork> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::contract(format!("learning rate must be finite and nonnegative, got {eta}")));
    }
    if stream.is_empty() {
        return Err(Error::contract("on-line learning needs at least one sample"));
    }
    if cfg.timesteps == 0 || !(cfg.max_rate_scale > 0.0 && cfg.max_rate_scale <= 1.0) {
        return Err(Error::contract("invalid simulation config"));
    }
    let pixels = stream.image_len();
    let classes = stream.class_count();
    let t = cfg.timesteps as f64;
    let mut w = vec![0.0f32; classes * pixels];
    for epoch in 0..epochs {
        for i in 0..stream.len() {
            let image = stream.image(i);
            if let Some(bad) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::contract(format!("sample {i} has intensity {bad} outside [0, 1]")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((epoch as u64) << 32) | i as u64);
            let mut pop = NeuronPopulation::new(classes, 1.0);
            let mut pre = vec![0u32; pixels];
            let mut post = vec![0u32; classes];
            let mut current = vec![0.0f64; classes];
            for _ in 0..cfg.timesteps {
                current.fill(0.0);
                for (p, &x) in image.iter().enumerate() {
                    if rng.random::<f32>() < x * cfg.max_rate_scale {
                        pre[p] += 1;
                        for (j, c) in current.iter_mut().enumerate() {
                            *c += w[j * pixels + p] as f64;
                        }
                    }
                }
                for (j, s) in step(&mut pop, &current).into_iter().enumerate() {
                    post[j] += s as u32;
                }
            }
            if eta == 0.0 {
                continue;
            }
            let label = stream.label(i);
            for j in 0..classes {
                let target = if j == label { TARGET_RATE } else { 0.0 };
                let err = eta * (target - post[j] as f64 / t);
                if err == 0.0 {
                    continue;
                }
                for (wv, &c) in w[j * pixels..(j + 1) * pixels].iter_mut().zip(&pre) {
                    *wv += (err * c as f64 / t) as f32;
                }
            }
        }
    }
    let layer = SpikingLayer::new(pixels, classes, w, vec![0.0; classes], 1.0, 0)?;
    SpikingNetwork::new(stream.image_shape(), Encoding::Poisson, classes, vec![layer])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::sim;
    use crate::tensor::Tensor;

    fn separable() -> LabeledImageSet {
        let mut px = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let k = i % 2;
            let hi = 0.6 + 0.02 * (i / 2) as f32;
            px.extend(if k == 0 { [hi, 0.05, hi, 0.0] } else { [0.0, hi, 0.05, hi] });
            labels.push(k);
        }
        LabeledImageSet::new(Tensor::new(vec![20, 1, 2, 2], px).unwrap(), labels, (0..20).collect(), vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn learns_separable_toy() {
        let cfg = SimConfig { timesteps: 64, encoder: Encoding::Poisson, seed: 3, ..SimConfig::default() };
        let net = train_single_layer_online(&separable(), &cfg, 0.05, 20).unwrap();
        assert!(sim::accuracy(&net, &separable(), &cfg).unwrap() >= 0.95);
        assert_eq!(net, train_single_layer_online(&separable(), &cfg, 0.05, 20).unwrap());
    }

    #[test]
    fn zero_rate_keeps_weights() {
        let cfg = SimConfig { timesteps: 16, encoder: Encoding::Poisson, ..SimConfig::default() };
        let net = train_single_layer_online(&separable(), &cfg, 0.0, 3).unwrap();
        assert!(net.layers()[0].weights().iter().all(|&w| w == 0.0));
        assert!(train_single_layer_online(&separable(), &cfg, -1.0, 1).is_err());
    }
}
