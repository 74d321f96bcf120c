//! Patient-grouped, class-stratified splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{largest_remainder, LabeledImageSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitReport {
    pub test_fraction: f64,
    pub train_patients: usize,
    pub test_patients: usize,
    /// Stratification problems that were resolved best-effort.
    pub warnings: Vec<String>,
}

/// Sample indices of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Fold {
    pub fn sets(&self, ds: &LabeledImageSet) -> (LabeledImageSet, LabeledImageSet) {
        (ds.subset(&self.train), ds.subset(&self.validation))
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Patients grouped by their majority label, each list shuffled with its own stream.
fn patients_by_class(ds: &LabeledImageSet, seed: u64) -> Vec<Vec<(u32, Vec<usize>)>> {
    let mut classes: Vec<Vec<(u32, Vec<usize>)>> = vec![Vec::new(); ds.class_count()];
    for (pid, idx) in ds.patient_groups() {
        let mut votes = vec![0usize; ds.class_count()];
        idx.iter().for_each(|&i| votes[ds.label(i)] += 1);
        let label = crate::tensor::argmax(&votes);
        classes[label].push((pid, idx));
    }
    for (k, list) in classes.iter_mut().enumerate() {
        list.shuffle(&mut rng(seed, k as u64));
    }
    classes
}

/// Splits by patient so that about `test_fraction` of the images, and of each
/// class, land in the test set. Both sides always get at least one patient.
pub fn split_stratified_by_patient(
    ds: &LabeledImageSet,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet, SplitReport)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::contract(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let groups = patients_by_class(ds, seed);
    let total_patients: usize = groups.iter().map(Vec::len).sum();
    if total_patients < 2 {
        return Err(Error::contract("a patient-disjoint split needs at least two patients"));
    }
    let mut report = SplitReport::default();
    let mut test_side: BTreeMap<u32, bool> = BTreeMap::new();
    let mut carry = 0.0f64;
    for (k, patients) in groups.iter().enumerate() {
        if patients.is_empty() {
            continue;
        }
        if patients.len() == 1 {
            report.warnings.push(format!(
                "class {} has a single patient; it appears on one side only",
                ds.class_names()[k]
            ));
        }
        let images: usize = patients.iter().map(|(_, idx)| idx.len()).sum();
        let target = test_fraction * images as f64 + carry;
        let mut taken = 0usize;
        for (pid, idx) in patients {
            let to_test = taken as f64 + idx.len() as f64 / 2.0 <= target;
            if to_test {
                taken += idx.len();
            }
            test_side.insert(*pid, to_test);
        }
        carry = target - taken as f64;
    }

    // Force both sides nonempty by moving the smallest patient across.
    let sizes: BTreeMap<u32, usize> = ds.patient_groups().into_iter().map(|(p, idx)| (p, idx.len())).collect();
    for side in [true, false] {
        if !test_side.values().any(|&t| t == side) {
            let (&pid, _) = sizes
                .iter()
                .filter(|(p, _)| test_side[*p] != side)
                .min_by_key(|(p, n)| (**n, **p))
                .expect("at least two patients");
            test_side.insert(pid, side);
            report.warnings.push(format!(
                "{} side was empty; moved patient {pid}",
                if side { "test" } else { "train" }
            ));
        }
    }

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, p) in ds.patient_ids().iter().enumerate() {
        if test_side[p] { test.push(i) } else { train.push(i) }
    }
    report.test_fraction = test.len() as f64 / ds.len() as f64;
    report.test_patients = test_side.values().filter(|&&t| t).count();
    report.train_patients = test_side.len() - report.test_patients;
    Ok((ds.subset(&train), ds.subset(&test), report))
}

/// `k` folds over patients; every sample is validated exactly once. Patients
/// are dealt class by class to the fold holding the fewest images of that class.
pub fn kfold_by_patient(ds: &LabeledImageSet, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let patients = ds.patients().len();
    if k < 2 || k > patients {
        return Err(Error::contract(format!("k must be in 2..={patients}, got {k}")));
    }
    let groups = patients_by_class(ds, seed);
    let mut fold_of: BTreeMap<u32, usize> = BTreeMap::new();
    let mut totals = vec![0usize; k];
    for list in &groups {
        let mut class_counts = vec![0usize; k];
        for (pid, idx) in list {
            let f = (0..k).min_by_key(|&f| (class_counts[f], totals[f], f)).expect("k >= 2");
            class_counts[f] += idx.len();
            totals[f] += idx.len();
            fold_of.insert(*pid, f);
        }
    }
    Ok((0..k)
        .map(|f| {
            let (mut train, mut validation) = (Vec::new(), Vec::new());
            for (i, p) in ds.patient_ids().iter().enumerate() {
                if fold_of[p] == f { validation.push(i) } else { train.push(i) }
            }
            Fold { train, validation }
        })
        .collect())
}

/// Class-stratified random subsample of about `fraction · N` images, kept in
/// the original order. `fraction = 1` returns the input unchanged.
pub fn subsample_fraction(ds: &LabeledImageSet, fraction: f64, seed: u64) -> Result<LabeledImageSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(ds.clone());
    }
    let counts = ds.class_counts();
    let total = (fraction * ds.len() as f64).round() as usize;
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let quota = largest_remainder(total, &weights);
    let mut keep = Vec::with_capacity(total);
    for (k, (&have, &want)) in counts.iter().zip(&quota).enumerate() {
        if have == 0 {
            continue;
        }
        if want == 0 {
            return Err(Error::contract(format!(
                "fraction {fraction} leaves class {} empty",
                ds.class_names()[k]
            )));
        }
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == k).collect();
        idx.shuffle(&mut rng(seed, k as u64));
        keep.extend_from_slice(&idx[..want.min(have)]);
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

/// Fractions used by the sample-efficiency sweep.
pub const SWEEP_FRACTIONS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};

    fn ds(n: usize, patients: usize) -> LabeledImageSet {
        gen_synthetic(&SynthConfig { n, patients, ..SynthConfig::default() }, 11).unwrap()
    }

    #[test]
    fn two_patients_split_one_each() {
        let d = gen_synthetic(&SynthConfig { n: 10, patients: 2, priors: vec![0.5, 0.5], ..SynthConfig::default() }, 2).unwrap();
        for f in [0.01, 0.3, 0.99] {
            let (train, test, _) = split_stratified_by_patient(&d, f, 0).unwrap();
            assert_eq!(train.patients().len(), 1);
            assert_eq!(test.patients().len(), 1);
        }
    }

    #[test]
    fn kfold_with_two_patients() {
        let d = gen_synthetic(&SynthConfig { n: 10, patients: 2, priors: vec![0.5, 0.5], ..SynthConfig::default() }, 2).unwrap();
        let folds = kfold_by_patient(&d, 2, 0).unwrap();
        for f in &folds {
            let (_, v) = f.sets(&d);
            assert_eq!(v.patients().len(), 1);
        }
        assert!(kfold_by_patient(&d, 3, 0).is_err());
    }

    #[test]
    fn subsample_keeps_every_class() {
        let d = ds(300, 30);
        let s = subsample_fraction(&d, 0.1, 5).unwrap();
        assert_eq!(s.len(), 30);
        assert!(s.class_counts().iter().all(|&c| c >= 1));
        assert_eq!(subsample_fraction(&d, 1.0, 5).unwrap(), d);
        assert!(subsample_fraction(&d, 0.001, 5).is_err());
        assert!(subsample_fraction(&d, 0.0, 5).is_err());
    }
}
