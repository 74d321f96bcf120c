//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria run one after another so their timing budgets are measured on an
//! otherwise idle process. Pass criterion numbers to run a subset:
//! `cargo test -p neuromed --test acceptance -- 3 12`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use neuromed::capsnet::{dynamic_routing, route};
use neuromed::data::{gen_synthetic, kfold_by_patient, split_stratified_by_patient, LabeledImageSet, SynthConfig};
use neuromed::energy::{joules_per_inference, loihi_energy_bounds, EnergyModel, DEFAULT_EFFICIENCY_FACTOR, DEFAULT_PER_CORE_WATTS};
use neuromed::metrics::{mcc, per_class_prf, ConfusionMatrix};
use neuromed::model::{read_model, train, write_model, zoo, LossKind, ModelGraph, TrainConfig};
use neuromed::snn::{self, poisson_encode, step, ConvertOptions, Encoding, NeuronPopulation, SimConfig, SpikingNetwork};
use neuromed::tensor::{grad_check, MarginParams, NodeId, Tape};
use neuromed::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Process CPU time from `/proc/self/stat`; wall time where that is unavailable.
fn cpu_seconds() -> Option<f64> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    let fields: Vec<&str> = stat.rsplit_once(')')?.1.split_whitespace().collect();
    let ticks: f64 = fields.get(11)?.parse::<f64>().ok()? + fields.get(12)?.parse::<f64>().ok()?;
    Some(ticks / 100.0)
}

struct Budget {
    wall: Instant,
    cpu: Option<f64>,
}

impl Budget {
    fn start() -> Self {
        Budget { wall: Instant::now(), cpu: cpu_seconds() }
    }

    fn seconds(&self) -> f64 {
        match (self.cpu, cpu_seconds()) {
            (Some(a), Some(b)) => b - a,
            _ => self.wall.elapsed().as_secs_f64(),
        }
    }
}

// ---------------------------------------------------------------------------
// Shared benchmark: seeded synthetic data, patient split, trained toy CNN and its conversion.

const DATA_SEED: u64 = 42;
const CNN_EPOCHS: usize = 15;
const CAPS_EPOCHS: usize = 4;

struct Bench {
    train: LabeledImageSet,
    test: LabeledImageSet,
    cnn: ModelGraph,
    cnn_accuracy: f64,
}

fn bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| {
        let ds = gen_synthetic(&SynthConfig::default(), DATA_SEED).expect("synthetic data");
        let (train_set, test, _) = split_stratified_by_patient(&ds, 0.3, DATA_SEED).expect("split");
        let fresh = zoo::toy_cnn(ds.image_shape(), ds.class_count(), 1).expect("toy cnn");
        let cfg = TrainConfig { epochs: CNN_EPOCHS, seed: 1, ..TrainConfig::default() };
        let (cnn, _) = train(&fresh, &train_set, &cfg).expect("cnn training");
        let cnn_accuracy = neuromed::model::train::accuracy(&cnn, &test).expect("cnn accuracy");
        Bench { train: train_set, test, cnn, cnn_accuracy }
    })
}

fn converted() -> &'static (SpikingNetwork, f64) {
    static C: OnceLock<(SpikingNetwork, f64)> = OnceLock::new();
    C.get_or_init(|| {
        let b = bench();
        let t = Instant::now();
        let opts = ConvertOptions { eval_timesteps: None, ..ConvertOptions::default() };
        let (net, _) = snn::normalize_and_convert_with(&b.cnn, &b.train, &opts).expect("conversion");
        (net, t.elapsed().as_secs_f64())
    })
}

fn constant(timesteps: usize) -> SimConfig {
    SimConfig { timesteps, encoder: Encoding::ConstantCurrent, ..SimConfig::default() }
}

// ---------------------------------------------------------------------------

fn c1_energy() -> Outcome {
    let t = Instant::now();
    let caps = joules_per_inference(38.556, 324.0).map_err(fail)?;
    let res = joules_per_inference(24.9535, 143.0).map_err(fail)?;
    let m = EnergyModel::new(res, DEFAULT_EFFICIENCY_FACTOR, DEFAULT_PER_CORE_WATTS, 55, 106.0).map_err(fail)?;
    let (lo, hi) = loihi_energy_bounds(&m);
    let got = [caps, res, lo, hi];
    let want = [0.1190, 0.1745, 0.0016, 0.0052];
    let close = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 1e-4);
    let secs = t.elapsed().as_secs_f64();
    check(close && secs < 1.0, format!("J/inference {caps:.4} / {res:.4} / {lo:.4}-{hi:.4} in {secs:.3}s"))
}

fn c2_accuracy() -> Outcome {
    let b = bench();
    let k = b.train.class_count();
    let fresh = zoo::capsnet(b.train.image_shape(), k, &zoo::CapsNetConfig::default(), 1).map_err(fail)?;
    let cfg = TrainConfig { epochs: CAPS_EPOCHS, loss: LossKind::CapsuleMargin, seed: 1, ..TrainConfig::default() };
    let budget = Budget::start();
    let (caps, _) = train(&fresh, &b.train, &cfg).map_err(fail)?;
    let secs = budget.seconds();
    let caps_acc = neuromed::model::train::accuracy(&caps, &b.test).map_err(fail)?;
    check(
        caps_acc >= 0.90 && secs <= 15.0 * 60.0 && b.cnn_accuracy >= 0.85,
        format!(
            "capsule model {:.1}% after {CAPS_EPOCHS} epochs in {:.1} CPU-min; toy CNN {:.1}% ({} test images)",
            100.0 * caps_acc,
            secs / 60.0,
            100.0 * b.cnn_accuracy,
            b.test.len()
        ),
    )
}

fn c3_conversion_gap() -> Outcome {
    let b = bench();
    let (net, convert_secs) = converted();
    let t = Instant::now();
    let snn_acc = snn::sim::accuracy(net, &b.test, &constant(256)).map_err(fail)?;
    let secs = convert_secs + t.elapsed().as_secs_f64();
    let gap = 100.0 * (b.cnn_accuracy - snn_acc).abs();
    check(
        gap <= 2.0 && secs < 600.0,
        format!("ANN {:.2}% vs SNN {:.2}% at T=256: gap {gap:.2} points, convert+simulate {secs:.0}s", 100.0 * b.cnn_accuracy, 100.0 * snn_acc),
    )
}

fn c4_routing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n_in, n_out, d) = (rng.random_range(1..=12), rng.random_range(2..=6), rng.random_range(2..=8));
        let data: Vec<f32> = (0..n_in * n_out * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let u = Tensor::new(vec![n_in, n_out, d], data).map_err(fail)?;
        let (_, states) = dynamic_routing(&u, 3).map_err(fail)?;
        for s in &states {
            for row in s.couplings.data().chunks(n_out) {
                worst = worst.max((row.iter().map(|&c| c as f64).sum::<f64>() - 1.0).abs());
            }
        }
    }
    // Both inputs agree on output 1 and cancel on output 0.
    let u = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 1.0]).map_err(fail)?;
    let (_, states) = dynamic_routing(&u, 3).map_err(fail)?;
    let c: Vec<[f32; 2]> = states.iter().map(|s| [s.couplings.data()[1], s.couplings.data()[3]]).collect();
    let monotone = c.windows(2).all(|w| w[1][0] > w[0][0] && w[1][1] > w[0][1]);
    check(
        worst <= 1e-6 && monotone,
        format!("max |row sum - 1| = {worst:.1e} over 100 instances; c[i,1] per iteration {:?}", c.iter().map(|x| x[0]).collect::<Vec<_>>()),
    )
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.sample::<f32, _>(StandardNormal)).collect()).expect("shape matches")
}

/// `Σ out ⊙ w` for a fixed random `w`, which makes every output element matter.
fn project(tape: &mut Tape<'_>, out: NodeId, w: &Tensor) -> neuromed::Result<NodeId> {
    let w = tape.constant(w.reshape(tape.value(out).shape().to_vec())?);
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

/// Smallest analytic gradient component relative to the largest. Central
/// differences of an f32 tape carry absolute noise near 1e-5 at eps = 1e-2,
/// so components much below the gradient scale cannot be resolved to a
/// relative 1e-3. Draws under this ratio are redrawn, the same way kinks are
/// avoided for piecewise ops.
const MIN_COMPONENT_RATIO: f32 = 0.02;

fn well_conditioned<F>(f: &F, x: &Tensor) -> neuromed::Result<bool>
where
    F: for<'t> Fn(&mut Tape<'t>, NodeId) -> neuromed::Result<NodeId>,
{
    let mut tape = Tape::new();
    let n = tape.leaf(x.clone());
    let loss = f(&mut tape, n)?;
    let g = tape.backward(loss)?.get(n).expect("leaf gradient").clone();
    let abs: Vec<f32> = g.data().iter().map(|v| v.abs()).collect();
    let max = abs.iter().cloned().fold(0.0, f32::max);
    Ok(max > 0.0 && abs.iter().all(|&a| a >= MIN_COMPONENT_RATIO * max))
}

struct GradStats {
    worst: BTreeMap<&'static str, f64>,
    redraws: usize,
}

impl GradStats {
    /// Draws until the input is well conditioned, then records grad_check.
    fn run<D, F>(&mut self, name: &'static str, eps: f32, rng: &mut ChaCha8Rng, mut draw: D) -> Result<(), String>
    where
        D: FnMut(&mut ChaCha8Rng) -> (Tensor, F),
        F: for<'t> Fn(&mut Tape<'t>, NodeId) -> neuromed::Result<NodeId>,
    {
        for _ in 0..10_000 {
            let (x, f) = draw(rng);
            if !well_conditioned(&f, &x).map_err(|e| format!("{name}: {e}"))? {
                self.redraws += 1;
                continue;
            }
            let e = grad_check(&f, &x, eps).map_err(|e| format!("{name}: {e}"))?;
            let w = self.worst.entry(name).or_insert(0.0);
            *w = w.max(e);
            return Ok(());
        }
        Err(format!("{name}: no well-conditioned draw"))
    }
}

fn c5_gradients() -> Outcome {
    const EPS: f32 = 1e-2;
    // Routing has large higher derivatives; a smaller step balances truncation against f32 noise.
    const ROUTING_EPS: f32 = 5e-3;
    let mut stats = GradStats { worst: BTreeMap::new(), redraws: 0 };
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        stats.run("squash", EPS, &mut rng, |r| {
            let x = random(r, &[3, 6], 0.7);
            let w = random(r, &[18], 1.0);
            (x, move |t: &mut Tape<'_>, n| { let y = t.squash(n); project(t, y, &w) })
        })?;
        stats.run("margin", EPS, &mut rng, |r| {
            let lengths = Tensor::vector((0..5).map(|_| r.random_range(0.02f32..0.98)).collect()).expect("vector");
            let label = r.random_range(0..5);
            (lengths, move |t: &mut Tape<'_>, n| t.margin_loss(n, label, MarginParams::default()))
        })?;
        stats.run("routing", ROUTING_EPS, &mut rng, |r| {
            let u = random(r, &[3, 2, 3], 0.5);
            let w = random(r, &[6], 1.0);
            (u, move |t: &mut Tape<'_>, n| { let v = route(t, n, 3)?; project(t, v, &w) })
        })?;
        stats.run("conv2d input", EPS, &mut rng, |r| {
            let img = random(r, &[2, 5, 5], 1.0);
            let k = random(r, &[2, 2, 3, 3], 0.3);
            let w = random(r, &[2 * 3 * 3], 1.0);
            (img, move |t: &mut Tape<'_>, n| { let kk = t.constant(k.clone()); let y = t.conv2d(n, kk, 2, 1)?; project(t, y, &w) })
        })?;
        stats.run("conv2d kernels", EPS, &mut rng, |r| {
            let img = random(r, &[1, 5, 5], 1.0);
            let k = random(r, &[2, 1, 3, 3], 0.3);
            let w = random(r, &[2 * 3 * 3], 1.0);
            (k, move |t: &mut Tape<'_>, n| { let i = t.constant(img.clone()); let y = t.conv2d(i, n, 2, 1)?; project(t, y, &w) })
        })?;
        stats.run("dense input", EPS, &mut rng, |r| {
            let x = random(r, &[6], 1.0);
            let (wt, b, w) = (random(r, &[4, 6], 0.5), random(r, &[4], 0.5), random(r, &[4], 1.0));
            (x, move |t: &mut Tape<'_>, n| { let (ww, bb) = (t.constant(wt.clone()), t.constant(b.clone())); let y = t.dense(n, ww, bb)?; project(t, y, &w) })
        })?;
        stats.run("dense weights", EPS, &mut rng, |r| {
            let x = random(r, &[6], 1.0);
            let (wt, b, w) = (random(r, &[3, 6], 0.5), random(r, &[3], 0.5), random(r, &[3], 1.0));
            (wt, move |t: &mut Tape<'_>, n| { let (xx, bb) = (t.constant(x.clone()), t.constant(b.clone())); let y = t.dense(xx, n, bb)?; project(t, y, &w) })
        })?;
    }
    let max = stats.worst.values().cloned().fold(0.0, f64::max);
    let detail = stats.worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    let oracle = (0..10).map(routing_oracle_error).fold(0.0, f64::max);
    check(
        max <= 1e-3 && oracle <= 1e-5,
        format!(
            "max relative error over 10 seeds (eps 1e-2, routing 5e-3): {detail}; {} ill-conditioned draws redrawn; \
             routing gradient vs f64 reference {oracle:.1e} of scale",
            stats.redraws
        ),
    )
}

/// Routing output in f64, written out directly from the update rules.
fn routing_f64(u: &[f64], n_in: usize, n_out: usize, d: usize, iters: usize) -> Vec<f64> {
    let mut b = vec![0.0; n_in * n_out];
    let mut v = vec![0.0; n_out * d];
    for it in 0..iters {
        let mut c = vec![0.0; n_in * n_out];
        for i in 0..n_in {
            let row = &b[i * n_out..(i + 1) * n_out];
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for j in 0..n_out {
                c[i * n_out + j] = (row[j] - m).exp() / z;
            }
        }
        for j in 0..n_out {
            let s: Vec<f64> = (0..d).map(|k| (0..n_in).map(|i| c[i * n_out + j] * u[(i * n_out + j) * d + k]).sum()).collect();
            let n2: f64 = s.iter().map(|x| x * x).sum();
            let scale = if n2 > 0.0 { n2 / (1.0 + n2) / n2.sqrt() } else { 0.0 };
            for k in 0..d {
                v[j * d + k] = s[k] * scale;
            }
        }
        if it + 1 < iters {
            for i in 0..n_in {
                for j in 0..n_out {
                    b[i * n_out + j] += (0..d).map(|k| u[(i * n_out + j) * d + k] * v[j * d + k]).sum::<f64>();
                }
            }
        }
    }
    v
}

/// Max |tape gradient − f64 central difference| over the gradient's largest component.
fn routing_oracle_error(seed: u64) -> f64 {
    let (n_in, n_out, d) = (4, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
    let u = random(&mut rng, &[n_in, n_out, d], 0.5);
    let w = random(&mut rng, &[n_out * d], 1.0);
    let mut tape = Tape::new();
    let x = tape.leaf(u.clone());
    let v = route(&mut tape, x, 3).expect("routing");
    let loss = project(&mut tape, v, &w).expect("projection");
    let g = tape.backward(loss).expect("backward").get(x).expect("leaf gradient").clone();
    let w64: Vec<f64> = w.data().iter().map(|&x| x as f64).collect();
    let f = |p: &[f64]| -> f64 { routing_f64(p, n_in, n_out, d, 3).iter().zip(&w64).map(|(a, b)| a * b).sum() };
    let base: Vec<f64> = u.data().iter().map(|&x| x as f64).collect();
    let scale = g.data().iter().fold(0.0f32, |a, &b| a.max(b.abs())) as f64;
    (0..base.len())
        .map(|i| {
            let (mut p, mut q) = (base.clone(), base.clone());
            p[i] += 1e-6;
            q[i] -= 1e-6;
            ((f(&p) - f(&q)) / 2e-6 - g.data()[i] as f64).abs() / scale
        })
        .fold(0.0, f64::max)
}

fn c6_if_dynamics() -> Outcome {
    let mut pop = NeuronPopulation::new(1, 1.0);
    let spikes: u32 = (0..10).map(|_| step(&mut pop, &[0.4])[0] as u32).sum();
    let exact = spikes == 4 && pop.v[0].abs() < 1e-12;
    let mut worst = 0.0f64;
    for i in 1..=9 {
        let a = i as f64 / 10.0;
        let mut pop = NeuronPopulation::new(1, 1.0);
        let count: u32 = (0..1000).map(|_| step(&mut pop, &[a])[0] as u32).sum();
        worst = worst.max((count as f64 / 1000.0 - a).abs());
    }
    check(
        // Bound is inclusive: a count one short of a·T sits exactly on it.
        exact && worst <= 1e-3 + 1e-12,
        format!("0.4 for 10 steps: {spikes} spikes, v = {:.2e}; max |count/T - a| = {worst:.1e} at T=1000", pop.v[0]),
    )
}

fn c7_poisson() -> Outcome {
    let trains = poisson_encode(&[0.5; 1000], 1000, 1.0, 7, 0).map_err(fail)?;
    let mut counts = vec![0u32; 1000];
    for row in &trains {
        for (c, &s) in counts.iter_mut().zip(row) {
            *c += s as u32;
        }
    }
    let inside = counts.iter().filter(|&&c| (453..=547).contains(&c)).count();
    check(inside >= 990, format!("{inside}/1000 pixels with count in [453, 547]"))
}

fn c8_metrics() -> Outcome {
    let m = mcc(&ConfusionMatrix::from_counts(&[vec![2, 1], vec![1, 2]]).map_err(fail)?);
    let perfect = ConfusionMatrix::from_counts(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 4]]).map_err(fail)?;
    let pm = mcc(&perfect);
    let prf_ok = per_class_prf(&perfect).iter().all(|s| s.precision == 1.0 && s.recall == 1.0 && s.f1 == 1.0);
    let single = mcc(&ConfusionMatrix::from_counts(&[vec![4, 0, 0], vec![3, 0, 0], vec![5, 0, 0]]).map_err(fail)?);
    check(
        (m - 1.0 / 3.0).abs() <= 1e-6 && pm == 1.0 && prf_ok && single == 0.0,
        format!("MCC [[2,1],[1,2]] = {m:.6}; perfect MCC {pm}, P=R=F1=1: {prf_ok}; single-class MCC {single}"),
    )
}

/// Dataset of 1-pixel images where only labels and patient ids matter.
fn patient_set(rng: &mut ChaCha8Rng) -> LabeledImageSet {
    let patients = rng.random_range(6..60u32);
    let (mut labels, mut pids) = (Vec::new(), Vec::new());
    for p in 0..patients {
        let label = if p < 3 { p as usize } else { rng.random_range(0..3) };
        for _ in 0..rng.random_range(1..=20) {
            labels.push(label);
            pids.push(1000 + p * 7);
        }
    }
    let n = labels.len();
    LabeledImageSet::new(Tensor::new(vec![n, 1, 1, 1], vec![0.5; n]).unwrap(), labels, pids, LabeledImageSet::generic_names(3)).unwrap()
}

fn c9_splits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut overlaps, mut out_of_bound, mut bad_partitions, mut worst_excess) = (0, 0, 0, f64::NEG_INFINITY);
    for seed in 0..200u64 {
        let ds = patient_set(&mut rng);
        let fraction = [0.2, 0.3, 0.5][seed as usize % 3];
        let (train_set, test, report) = split_stratified_by_patient(&ds, fraction, seed).map_err(fail)?;
        if !train_set.patients().is_disjoint(&test.patients()) {
            overlaps += 1;
        }
        let largest = ds.patient_groups().values().map(Vec::len).max().unwrap_or(0) as f64;
        let excess = (report.test_fraction - fraction).abs() - largest / ds.len() as f64;
        worst_excess = worst_excess.max(excess);
        if excess > 1e-12 {
            out_of_bound += 1;
        }
        let folds = kfold_by_patient(&ds, 5, seed).map_err(fail)?;
        let mut seen = vec![0u32; ds.len()];
        for f in &folds {
            f.validation.iter().for_each(|&i| seen[i] += 1);
            let (tr, va) = f.sets(&ds);
            if !tr.patients().is_disjoint(&va.patients()) || f.train.len() + f.validation.len() != ds.len() {
                bad_partitions += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            bad_partitions += 1;
        }
    }
    check(
        overlaps == 0 && out_of_bound == 0 && bad_partitions == 0,
        format!(
            "200 splits + 5-fold partitions: {overlaps} patient overlaps, {out_of_bound} fractions beyond one patient (worst margin {:.4}), {bad_partitions} bad folds",
            -worst_excess
        ),
    )
}

fn c10_rejection() -> Outcome {
    let res = zoo::residual([1, 28, 28], 3, 2, 8, 0).map_err(fail)?;
    let caps = zoo::capsnet([1, 28, 28], 3, &zoo::CapsNetConfig::default(), 0).map_err(fail)?;
    let rv = snn::validate_convertible(&res);
    let cv = snn::validate_convertible(&caps);
    let names_add = !rv.is_empty() && rv.iter().all(|v| v.contains("(Add)"));
    let names_caps = cv.iter().any(|v| v.contains("(PrimaryCaps)")) && cv.iter().any(|v| v.contains("(ClassCaps)"));
    let calib = bench_free_calibration();
    let refused = [&res, &caps]
        .iter()
        .all(|m| matches!(snn::normalize_and_convert(m, &calib, 99.9), Err(Error::Unconvertible(_))));
    check(names_add && names_caps && refused, format!("residual: {rv:?}; capsule: {cv:?}"))
}

fn bench_free_calibration() -> LabeledImageSet {
    let cfg = SynthConfig { n: 12, patients: 4, ..SynthConfig::default() };
    gen_synthetic(&cfg, 1).expect("tiny dataset")
}

fn random_model(rng: &mut ChaCha8Rng) -> neuromed::Result<ModelGraph> {
    let classes = rng.random_range(2..=4);
    let seed = rng.random();
    match rng.random_range(0..4) {
        0 => zoo::toy_cnn([1, 20 + 4 * rng.random_range(0..3), 24], classes, seed),
        1 => {
            let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(1..16)).collect();
            zoo::dense_mlp([rng.random_range(1..3), rng.random_range(2..9), rng.random_range(2..9)], &hidden, classes, 0.25, None, seed)
        }
        2 => zoo::residual([1, 8, 8], classes, rng.random_range(1..3), rng.random_range(1..5), seed),
        _ => {
            let cfg = zoo::CapsNetConfig {
                conv_filters: 4,
                conv_kernel: 3,
                primary_channels: 2,
                primary_dim: 4,
                primary_kernel: 3,
                primary_stride: 2,
                class_dim: rng.random_range(2..6),
                routing_iters: rng.random_range(1..4),
                dropout: 0.0,
                decoder: vec![8],
            };
            zoo::capsnet([1, 12, 12], classes, &cfg, seed)
        }
    }
}

fn random_dataset(rng: &mut ChaCha8Rng) -> LabeledImageSet {
    let (n, c, h, w) = (rng.random_range(1..20), rng.random_range(1..3), rng.random_range(1..9), rng.random_range(1..9));
    let pixels = (0..n * c * h * w).map(|_| rng.random::<f32>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
    let pids = (0..n).map(|_| rng.random_range(0..5)).collect();
    LabeledImageSet::new(Tensor::new(vec![n, c, h, w], pixels).unwrap(), labels, pids, LabeledImageSet::generic_names(3)).unwrap()
}

/// Corrupts one payload byte, truncates, and breaks the magic.
fn corruptions_rejected(bytes: &[u8], rng: &mut ChaCha8Rng, read: impl Fn(&[u8]) -> neuromed::Result<()>) -> bool {
    let mut flipped = bytes.to_vec();
    let i = rng.random_range(6..bytes.len());
    flipped[i] ^= 1 << rng.random_range(0..8);
    let mut magic = bytes.to_vec();
    magic[0] ^= 0x20;
    matches!(read(&flipped), Err(Error::Checksum))
        && matches!(read(&bytes[..bytes.len() - 1]), Err(Error::Checksum))
        && matches!(read(&magic), Err(Error::BadMagic { .. }))
}

fn c11_serialization() -> Outcome {
    use neuromed::data::{read_dataset, write_dataset};
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut model_mismatch, mut data_mismatch, mut unrejected) = (0, 0, 0);
    for _ in 0..100 {
        let m = random_model(&mut rng).map_err(fail)?;
        let mut a = Vec::new();
        write_model(&m, &mut a).map_err(fail)?;
        let back = read_model(a.as_slice()).map_err(fail)?;
        let mut b = Vec::new();
        write_model(&back, &mut b).map_err(fail)?;
        if a != b || back != m {
            model_mismatch += 1;
        }
        if !corruptions_rejected(&a, &mut rng, |x| read_model(x).map(drop)) {
            unrejected += 1;
        }

        let d = random_dataset(&mut rng);
        let mut a = Vec::new();
        write_dataset(&d, &mut a).map_err(fail)?;
        let back = read_dataset(a.as_slice()).map_err(fail)?;
        let mut b = Vec::new();
        write_dataset(&back, &mut b).map_err(fail)?;
        if a != b || back != d {
            data_mismatch += 1;
        }
        if !corruptions_rejected(&a, &mut rng, |x| read_dataset(x).map(drop)) {
            unrejected += 1;
        }
    }
    check(
        model_mismatch + data_mismatch + unrejected == 0,
        format!("100 models, 100 datasets: {model_mismatch} + {data_mismatch} round-trip mismatches, {unrejected} corruptions accepted"),
    )
}

fn c12_sweep() -> Outcome {
    let b = bench();
    let (net, _) = converted();
    let t_list = [16, 32, 64, 128, 256, 512];
    let rows = snn::timestep_sweep(net, &b.test, &t_list, &constant(512)).map_err(fail)?;
    let deltas_ok = rows.iter().skip(1).all(|r| r.delta_vs_half.is_some()) && rows[0].delta_vs_half.is_none();
    let acc = |t: usize| rows.iter().find(|r| r.timesteps == t).map(|r| r.accuracy).unwrap_or(f64::NAN);
    let table = rows
        .iter()
        .map(|r| format!("T={} {:.2}%{}", r.timesteps, 100.0 * r.accuracy, r.delta_vs_half.map(|d| format!(" ({:+.2})", 100.0 * d)).unwrap_or_default()))
        .collect::<Vec<_>>()
        .join(", ");
    check(rows.len() == t_list.len() && deltas_ok && acc(512) >= acc(16) - 0.01, table)
}

// ---------------------------------------------------------------------------
// CLI determinism.

const ENERGY: &str = "capsnet.power_watts=38.556\ncapsnet.inferences_per_second=324\n\
resnet.power_watts=24.9535\nresnet.inferences_per_second=143\n\
snn.kind=loihi\nsnn.gpu_reference=resnet\nsnn.cores=55\nsnn.inferences_per_second=106\n";

fn cli_script() -> Vec<Vec<&'static str>> {
    let s = |line: &'static str| line.split_whitespace().collect::<Vec<_>>();
    vec![
        s("gen-data --n 160 --patients 16 --seed 7 --out d.ngds"),
        s("split --data d.ngds --seed 7 --train-out tr.ngds --test-out te.ngds"),
        s("train --arch cnn --data tr.ngds --val te.ngds --epochs 2 --seed 3 --out cnn.nnir"),
        s("train --arch dense --pca 10 --data tr.ngds --kfold 3 --epochs 2 --seed 3 --out kfold.csv"),
        s("train --arch capsnet --data tr.ngds --epochs 1 --batch-size 16 --seed 3 --out caps.nnir"),
        s("convert --model cnn.nnir --calib tr.ngds --eval-timesteps 32 --out cnn.snnc"),
        s("simulate --snn cnn.snnc --data te.ngds --T 48 --out sim.csv --trace trace.csv --trace-index 1"),
        s("simulate --snn cnn.snnc --data te.ngds --encoder poisson --seed 7 --sweep-T 8,16,32 --out sweep.csv"),
        s("benchmark --models cnn=cnn.nnir,snn=cnn.snnc --data te.ngds --train-data tr.ngds --fraction 0.2 --efficiency-epochs 1 --energy-config energy.cfg --T 16 --throughput-inferences 4 --throughput-runs 1 --seed 5 --out bench.csv"),
        s("explain --model caps.nnir --data te.ngds --image 2 --dims 0..3 --deltas -0.2,0,0.2 --out explain.ngds"),
    ]
}

/// Manifest with the fields that legitimately vary between runs removed.
fn normalized_manifest(text: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(text).expect("manifest is JSON");
    let obj = v.as_object_mut().expect("manifest is an object");
    obj.remove("wall_seconds");
    obj.remove("threads");
    if let Some(outputs) = obj.get_mut("outputs").and_then(|o| o.as_array_mut()) {
        outputs.retain(|e| !e["path"].as_str().unwrap_or("").ends_with(".throughput.csv"));
    }
    v
}

fn run_script(dir: &Path, threads: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    std::fs::write(dir.join("energy.cfg"), ENERGY).map_err(fail)?;
    let mut dataset_after_gen = None;
    for args in cli_script() {
        let out = Command::new(env!("CARGO_BIN_EXE_neuromed"))
            .current_dir(dir)
            .arg("--threads")
            .arg(threads.to_string())
            .args(&args)
            .output()
            .map_err(fail)?;
        if !out.status.success() {
            return Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
        }
        if args[0] == "gen-data" {
            dataset_after_gen = Some(std::fs::read(dir.join("d.ngds")).map_err(fail)?);
        }
    }
    if dataset_after_gen != Some(std::fs::read(dir.join("d.ngds")).map_err(fail)?) {
        return Err("an input file was modified".into());
    }
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(fail)? {
        let path = entry.map_err(fail)?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".throughput.csv") {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(fail)?;
        let bytes = if name.ends_with(".manifest.json") {
            normalized_manifest(std::str::from_utf8(&bytes).map_err(fail)?).to_string().into_bytes()
        } else {
            bytes
        };
        files.insert(name, bytes);
    }
    Ok(files)
}

fn c13_determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(fail)?;
    let mut runs = Vec::new();
    for (i, threads) in [1, 2, 1].into_iter().enumerate() {
        let dir = root.path().join(format!("run{i}"));
        std::fs::create_dir(&dir).map_err(fail)?;
        runs.push((threads, run_script(&dir, threads)?));
    }
    let (_, reference) = &runs[0];
    let mut differing = BTreeSet::new();
    for (_, files) in &runs[1..] {
        let names: BTreeSet<&String> = reference.keys().chain(files.keys()).collect();
        for n in names {
            if reference.get(n) != files.get(n) {
                differing.insert(n.clone());
            }
        }
    }
    check(
        differing.is_empty(),
        format!(
            "{} commands, {} artifacts compared across thread counts 1/2/1; differing: {:?}",
            cli_script().len(),
            reference.len(),
            differing
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    type Criterion = (u32, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 13] = [
        (1, "energy arithmetic", c1_energy),
        (2, "synthetic accuracy", c2_accuracy),
        (3, "conversion gap", c3_conversion_gap),
        (4, "routing invariants", c4_routing),
        (5, "gradient checks", c5_gradients),
        (6, "IF dynamics", c6_if_dynamics),
        (7, "Poisson statistics", c7_poisson),
        (8, "metric oracles", c8_metrics),
        (9, "split invariants", c9_splits),
        (10, "converter rejection", c10_rejection),
        (11, "serialization", c11_serialization),
        (12, "timestep sweep", c12_sweep),
        (13, "CLI determinism", c13_determinism),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (id, name, _) in &criteria {
            println!("criterion_{id:02}_{}: test", name.replace(' ', "_"));
        }
        return;
    }
    let wanted: BTreeSet<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let took = fmt_duration(t.elapsed());
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} {name}: {detail} [{took}]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {id:>2} {name}: {detail} [{took}]");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}
