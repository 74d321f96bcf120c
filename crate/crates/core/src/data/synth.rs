//! Synthetic brain-slice images: a noisy elliptical skull ring over brain
//! tissue plus one bright blob. The blob's position relative to the ring
//! encodes the class: on the inner rim (0), strictly inside (1), or in a fixed
//! inferior region (2). Images from one patient share the skull deformation
//! and the tumor's base location.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{largest_remainder, LabeledImageSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub priors: Vec<f64>,
    pub patients: usize,
    /// Square image side in pixels.
    pub size: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n: 3064, priors: vec![0.23, 0.47, 0.30], patients: 233, size: 28, noise: 0.04 }
    }
}

/// Downward direction in image coordinates (y grows downwards).
const INFERIOR: f64 = PI / 2.0;

struct Patient {
    label: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rot: f64,
    thickness: f64,
    ring_level: f64,
    tissue_level: f64,
    tumor_angle: f64,
    tumor_radius: f64,
    tumor_sigma: f64,
    tumor_level: f64,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

impl Patient {
    fn sample(label: usize, rng: &mut ChaCha8Rng, scale: f64) -> Self {
        let (tumor_angle, tumor_radius) = match label {
            0 => loop {
                let a = rng.random_range(0.0..2.0 * PI);
                if angle_gap(a, INFERIOR) > 0.7 {
                    break (a, rng.random_range(0.80..0.90));
                }
            },
            1 => loop {
                let a = rng.random_range(0.0..2.0 * PI);
                let r = rng.random_range(0.0..0.55);
                if angle_gap(a, INFERIOR) > 0.9 || r < 0.2 {
                    break (a, r);
                }
            },
            _ => (INFERIOR + rng.random_range(-0.15..0.15), rng.random_range(0.42..0.52)),
        };
        Patient {
            label,
            cx: scale * (13.5 + rng.random_range(-1.0..1.0)),
            cy: scale * (13.5 + rng.random_range(-1.0..1.0)),
            rx: scale * rng.random_range(10.0..11.5),
            ry: scale * rng.random_range(10.5..12.0),
            rot: rng.random_range(-0.3..0.3),
            thickness: scale * rng.random_range(1.0..1.6),
            ring_level: rng.random_range(0.75..0.95),
            tissue_level: rng.random_range(0.25..0.40),
            tumor_angle,
            tumor_radius,
            tumor_sigma: scale * rng.random_range(1.3..2.2),
            tumor_level: rng.random_range(0.45..0.70),
        }
    }

    fn render(&self, rng: &mut ChaCha8Rng, size: usize, noise: f64) -> Vec<f32> {
        let angle = self.tumor_angle + rng.random_range(-0.1..0.1);
        let radius = (self.tumor_radius + rng.random_range(-0.04..0.04)).max(0.0);
        let sigma = self.tumor_sigma * rng.random_range(0.8..1.2);
        let level = self.tumor_level * rng.random_range(0.9..1.1);
        // Tumor center in the skull's own frame, then rotated into the image.
        let (lx, ly) = (radius * self.rx * angle.cos(), radius * self.ry * angle.sin());
        let (cr, sr) = (self.rot.cos(), self.rot.sin());
        let tx = self.cx + lx * cr - ly * sr;
        let ty = self.cy + lx * sr + ly * cr;

        let scale = size as f64 / 28.0;
        let specks: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let a = rng.random_range(0.0..2.0 * PI);
                let r = rng.random_range(0.0..0.8);
                let (x, y) = (r * self.rx * a.cos(), r * self.ry * a.sin());
                (self.cx + x * cr - y * sr, self.cy + x * sr + y * cr, rng.random_range(0.04..0.10))
            })
            .collect();
        let gauss = Normal::new(0.0, noise).expect("noise is finite and nonnegative");
        let mean_r = 0.5 * (self.rx + self.ry);

        let mut img = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
                let (u, v) = (px * cr + py * sr, -px * sr + py * cr);
                let rho = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt();
                let ring = self.ring_level * (-((rho - 1.0) * mean_r / self.thickness).powi(2)).exp();
                let tissue = self.tissue_level / (1.0 + ((rho - 0.93) * mean_r / 0.7).exp());
                let d2 = (x as f64 + 0.5 - tx).powi(2) + (y as f64 + 0.5 - ty).powi(2);
                let tumor = level * (-d2 / (2.0 * sigma * sigma)).exp();
                let speck: f64 = specks
                    .iter()
                    .map(|&(sx, sy, a)| a * (-((x as f64 + 0.5 - sx).powi(2) + (y as f64 + 0.5 - sy).powi(2)) / (2.0 * scale * scale)).exp())
                    .sum();
                let value = ring.max(tissue + tumor + speck) + gauss.sample(rng);
                img.push(value.clamp(0.0, 1.0) as f32);
            }
        }
        img
    }
}

/// Patients per class: proportional to the priors, at least one for every
/// class with images and never more than that class's image count.
fn patients_per_class(counts: &[usize], priors: &[f64], patients: usize) -> Result<Vec<usize>> {
    let nonempty = counts.iter().filter(|&&c| c > 0).count();
    if patients < nonempty {
        return Err(Error::contract(format!("{patients} patients cannot cover {nonempty} nonempty classes")));
    }
    let mut per = largest_remainder(patients, priors);
    for (p, &c) in per.iter_mut().zip(counts) {
        *p = if c == 0 { 0 } else { (*p).clamp(1, c) };
    }
    let mut total: usize = per.iter().sum();
    while total > patients {
        let k = (0..per.len()).filter(|&k| per[k] > 1).max_by_key(|&k| (per[k], std::cmp::Reverse(k))).expect("a class has spare patients");
        per[k] -= 1;
        total -= 1;
    }
    while total < patients {
        // Give the next patient to the class with the most images per patient.
        let k = (0..per.len())
            .filter(|&k| per[k] < counts[k])
            .max_by(|&a, &b| {
                let ra = counts[a] as f64 / per[a] as f64;
                let rb = counts[b] as f64 / per[b] as f64;
                ra.total_cmp(&rb).then(b.cmp(&a))
            })
            .expect("patients never exceed images");
        per[k] += 1;
        total += 1;
    }
    Ok(per)
}

/// Generates `cfg.n` labeled images. Class counts are `n·priors` rounded by
/// largest remainder; the output is deterministic in `seed`.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<LabeledImageSet> {
    let sum: f64 = cfg.priors.iter().sum();
    if cfg.priors.is_empty() || cfg.priors.iter().any(|&p| !(p > 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("priors must be positive and sum to 1, got {:?}", cfg.priors)));
    }
    if cfg.n == 0 || cfg.patients == 0 || cfg.patients > cfg.n {
        return Err(Error::contract(format!("need 1 <= patients <= n, got {} patients for {} images", cfg.patients, cfg.n)));
    }
    if cfg.size < 8 {
        return Err(Error::contract("images must be at least 8 pixels wide"));
    }
    if !(cfg.noise >= 0.0) || !cfg.noise.is_finite() {
        return Err(Error::contract("noise must be finite and nonnegative"));
    }
    let counts = largest_remainder(cfg.n, &cfg.priors);
    let per_class = patients_per_class(&counts, &cfg.priors, cfg.patients)?;

    let mut ids: Vec<u32> = (0..cfg.patients as u32).collect();
    ids.shuffle(&mut rng_for(seed, u64::MAX));

    let scale = cfg.size as f64 / 28.0;
    let mut samples: Vec<(usize, u32, Vec<f32>)> = Vec::with_capacity(cfg.n);
    let mut patient_index = 0usize;
    for (label, (&count, &np)) in counts.iter().zip(&per_class).enumerate() {
        if count == 0 {
            continue;
        }
        for (j, &images) in largest_remainder(count, &vec![1.0; np]).iter().enumerate() {
            let pi = patient_index + j;
            let patient = Patient::sample(label, &mut rng_for(seed, pi as u64), scale);
            for _ in 0..images {
                let mut rng = rng_for(seed, (1u64 << 32) + samples.len() as u64);
                let img = patient.render(&mut rng, cfg.size, cfg.noise);
                samples.push((patient.label, ids[pi], img));
            }
        }
        patient_index += np;
    }
    samples.shuffle(&mut rng_for(seed, u64::MAX - 1));

    let mut pixels = Vec::with_capacity(cfg.n * cfg.size * cfg.size);
    let mut labels = Vec::with_capacity(cfg.n);
    let mut patients = Vec::with_capacity(cfg.n);
    for (label, pid, img) in samples {
        labels.push(label);
        patients.push(pid);
        pixels.extend(img);
    }
    let images = Tensor::new(vec![cfg.n, 1, cfg.size, cfg.size], pixels)?;
    LabeledImageSet::new(images, labels, patients, LabeledImageSet::generic_names(cfg.priors.len()))
}
