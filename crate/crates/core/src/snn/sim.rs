//! Timestep-driven integrate-and-fire simulation.
//!
//! Membranes integrate in f64, reset by subtraction and never drop below −θ.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::network::{Encoding, SpikingNetwork};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::argmax;

pub const DEFAULT_TIMESTEPS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub timesteps: usize,
    pub encoder: Encoding,
    /// Poisson firing probability per unit intensity.
    pub max_rate_scale: f32,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { timesteps: DEFAULT_TIMESTEPS, encoder: Encoding::ConstantCurrent, max_rate_scale: 1.0, seed: 0 }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::contract("simulation needs at least one timestep"));
        }
        if !(self.max_rate_scale > 0.0 && self.max_rate_scale <= 1.0) {
            return Err(Error::contract(format!("max rate scale must be in (0, 1], got {}", self.max_rate_scale)));
        }
        Ok(())
    }
}

/// Membrane state of one population.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronPopulation {
    pub v: Vec<f64>,
    pub threshold: f64,
}

impl NeuronPopulation {
    pub fn new(size: usize, threshold: f64) -> Self {
        NeuronPopulation { v: vec![0.0; size], threshold }
    }
}

/// Integrates one step of input current and returns the spike vector.
pub fn step(pop: &mut NeuronPopulation, current: &[f64]) -> Vec<u8> {
    let mut spikes = vec![0u8; pop.v.len()];
    step_into(pop, current, |i| spikes[i] = 1);
    spikes
}

#[inline]
fn step_into<C: Copy + Into<f64>>(pop: &mut NeuronPopulation, current: &[C], mut on_spike: impl FnMut(usize)) {
    let theta = pop.threshold;
    for (i, (v, &c)) in pop.v.iter_mut().zip(current).enumerate() {
        *v += c.into();
        if *v >= theta {
            *v -= theta;
            on_spike(i);
        } else if *v < -theta {
            *v = -theta;
        }
    }
}

fn sample_rng(seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_index);
    rng
}

fn check_intensities(image: &[f32]) -> Result<()> {
    match image.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::contract(format!("pixel {i} has intensity {} outside [0, 1]", image[i]))),
        None => Ok(()),
    }
}

/// Bernoulli spike trains `[T][pixels]` with per-step probability
/// `intensity · max_rate_scale`. The draw order is step-major on the stream
/// `(seed, sample_index)`, so each (pixel, step) is reproducible.
pub fn poisson_encode(image: &[f32], timesteps: usize, max_rate_scale: f32, seed: u64, sample_index: u64) -> Result<Vec<Vec<u8>>> {
    check_intensities(image)?;
    let mut rng = sample_rng(seed, sample_index);
    Ok((0..timesteps)
        .map(|_| image.iter().map(|&p| u8::from(rng.random::<f32>() < p * max_rate_scale)).collect())
        .collect())
}

/// Spike counts of one simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    /// Per population, per neuron.
    pub counts: Vec<Vec<u32>>,
    /// Output spikes per step, `[T][classes]`.
    pub output_spikes: Vec<Vec<u8>>,
    pub predicted: usize,
}

impl RunTrace {
    pub fn output_counts(&self) -> &[u32] {
        self.counts.last().expect("network has layers")
    }

    /// `step,neuron,spike` rows for every output neuron at every step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,neuron,spike\n");
        for (t, row) in self.output_spikes.iter().enumerate() {
            for (n, s) in row.iter().enumerate() {
                let _ = writeln!(out, "{t},{n},{s}");
            }
        }
        out
    }
}

/// Lowest index among the largest counts.
pub fn readout(counts: &[u32]) -> usize {
    argmax(counts)
}

struct Simulation<'n> {
    net: &'n SpikingNetwork,
    pops: Vec<NeuronPopulation>,
    counts: Vec<Vec<u32>>,
    currents: Vec<Vec<f32>>,
    spikes: Vec<Vec<u32>>,
    first_current: Option<Vec<f32>>,
    poisson: Option<(ChaCha8Rng, Vec<f32>)>,
}

impl<'n> Simulation<'n> {
    fn new(net: &'n SpikingNetwork, image: &[f32], cfg: &SimConfig, sample_index: u64) -> Result<Self> {
        cfg.validate()?;
        let pixels: usize = net.input_shape().iter().product();
        if image.len() != pixels {
            return Err(Error::dim(format!("image has {} pixels, network expects {pixels}", image.len())));
        }
        check_intensities(image)?;
        let layers = net.layers();
        let first = &layers[0];
        let (first_current, poisson) = match cfg.encoder {
            Encoding::ConstantCurrent => {
                // The input never changes, so layer-1 current is computed once.
                let w = first.weights();
                let current = (0..first.outputs())
                    .map(|o| (crate::tensor::kernels::dot(&w[o * pixels..(o + 1) * pixels], image) + first.bias()[o] as f64) as f32)
                    .collect();
                (Some(current), None)
            }
            Encoding::Poisson => {
                let probs = image.iter().map(|&p| p * cfg.max_rate_scale).collect();
                (None, Some((sample_rng(cfg.seed, sample_index), probs)))
            }
        };
        Ok(Simulation {
            net,
            pops: layers.iter().map(|l| NeuronPopulation::new(l.outputs(), l.threshold() as f64)).collect(),
            counts: layers.iter().map(|l| vec![0; l.outputs()]).collect(),
            currents: layers.iter().map(|l| vec![0.0; l.outputs()]).collect(),
            spikes: layers.iter().map(|_| Vec::new()).collect(),
            first_current,
            poisson,
        })
    }

    fn advance(&mut self) {
        let layers = self.net.layers();
        for (l, layer) in layers.iter().enumerate() {
            let (before, rest) = self.spikes.split_at_mut(l);
            let current = &mut self.currents[l];
            if l == 0 {
                match (&self.first_current, &mut self.poisson) {
                    (Some(c), _) => current.copy_from_slice(c),
                    (None, Some((rng, probs))) => {
                        current.copy_from_slice(layer.bias());
                        for (i, &p) in probs.iter().enumerate() {
                            if rng.random::<f32>() < p {
                                layer.csc.add_column(i, current);
                            }
                        }
                    }
                    (None, None) => unreachable!("an encoder is always configured"),
                }
            } else {
                current.copy_from_slice(layer.bias());
                for &i in &before[l - 1] {
                    layer.csc.add_column(i as usize, current);
                }
            }
            let out = &mut rest[0];
            out.clear();
            let counts = &mut self.counts[l];
            step_into(&mut self.pops[l], current, |i| {
                out.push(i as u32);
                counts[i] += 1;
            });
        }
    }

    fn output_step(&self) -> Vec<u8> {
        let mut row = vec![0u8; self.net.class_count()];
        for &i in self.spikes.last().expect("network has layers") {
            row[i as usize] = 1;
        }
        row
    }
}

/// Simulates `cfg.timesteps` steps; the prediction is the output neuron with
/// the most spikes, ties going to the lowest class index. `sample_index`
/// selects the Poisson stream.
pub fn run_inference(net: &SpikingNetwork, image: &[f32], cfg: &SimConfig, sample_index: u64) -> Result<RunTrace> {
    let mut sim = Simulation::new(net, image, cfg, sample_index)?;
    let mut output_spikes = Vec::with_capacity(cfg.timesteps);
    for _ in 0..cfg.timesteps {
        sim.advance();
        output_spikes.push(sim.output_step());
    }
    let predicted = readout(sim.counts.last().expect("network has layers"));
    Ok(RunTrace { counts: sim.counts, output_spikes, predicted })
}

/// Output spike counts after each checkpoint in `checkpoints` (ascending),
/// from a single run of `max(checkpoints)` steps.
pub fn output_counts_at(net: &SpikingNetwork, image: &[f32], cfg: &SimConfig, sample_index: u64, checkpoints: &[usize]) -> Result<Vec<Vec<u32>>> {
    let max = *checkpoints.last().ok_or_else(|| Error::contract("no checkpoints"))?;
    let cfg = SimConfig { timesteps: max, ..*cfg };
    let mut sim = Simulation::new(net, image, &cfg, sample_index)?;
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = checkpoints.iter().peekable();
    for t in 1..=max {
        sim.advance();
        while next.peek() == Some(&&t) {
            out.push(sim.counts.last().expect("network has layers").clone());
            next.next();
        }
    }
    Ok(out)
}

/// Predicted class for every sample of `data`; sample `i` uses Poisson stream `i`.
pub fn predict_dataset(net: &SpikingNetwork, data: &LabeledImageSet, cfg: &SimConfig) -> Result<Vec<usize>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| run_inference(net, data.image(i), cfg, i as u64).map(|t| t.predicted))
        .collect()
}

pub fn accuracy(net: &SpikingNetwork, data: &LabeledImageSet, cfg: &SimConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("cannot score an empty set"));
    }
    let preds = predict_dataset(net, data, cfg)?;
    Ok(preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count() as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub timesteps: usize,
    pub accuracy: f64,
    /// `accuracy(T) − accuracy(T/2)` when `T/2` was also swept.
    pub delta_vs_half: Option<f64>,
}

/// Accuracy at each `T` in the ascending list, from one run per sample to the largest `T`.
pub fn timestep_sweep(net: &SpikingNetwork, data: &LabeledImageSet, t_list: &[usize], cfg: &SimConfig) -> Result<Vec<SweepRow>> {
    if t_list.is_empty() || t_list.windows(2).any(|w| w[0] >= w[1]) || t_list[0] == 0 {
        return Err(Error::contract(format!("timestep list must be nonempty, positive and ascending: {t_list:?}")));
    }
    if data.is_empty() {
        return Err(Error::contract("cannot sweep an empty set"));
    }
    let hits: Vec<Vec<bool>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let counts = output_counts_at(net, data.image(i), cfg, i as u64, t_list)?;
            Ok(counts.iter().map(|c| readout(c) == data.label(i)).collect())
        })
        .collect::<Result<_>>()?;
    let acc: Vec<f64> = (0..t_list.len())
        .map(|k| hits.iter().filter(|h| h[k]).count() as f64 / data.len() as f64)
        .collect();
    Ok(t_list
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let half = (t % 2 == 0).then(|| t_list.iter().position(|&u| u == t / 2)).flatten();
            SweepRow { timesteps: t, accuracy: acc[k], delta_vs_half: half.map(|h| acc[k] - acc[h]) }
        })
        .collect())
}

/// `T,accuracy,delta_vs_half` rows; a missing half leaves the last field empty.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("T,accuracy,delta_vs_half\n");
    for r in rows {
        let d = r.delta_vs_half.map(|d| format!("{d:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:.6},{}", r.timesteps, r.accuracy, d);
    }
    out
}
