//! Confusion-matrix metrics.

use crate::error::{Error, Result};

/// `K×K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::dim("confusion matrix must be square and nonempty"));
        }
        Ok(ConfusionMatrix { k, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks_exact(self.k).map(|r| r.to_vec()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks_exact(self.k).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.k).map(|j| (0..self.k).map(|i| self.get(i, j)).sum()).collect()
    }

    /// trace / total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 { 0.0 } else { self.trace() as f64 / total as f64 }
    }

    /// CSV with a header row of predicted classes.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for n in names.iter().take(self.k) {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, row) in self.rows().iter().enumerate() {
            out.push_str(names.get(i).map_or("?", |s| s.as_str()));
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::contract(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if k == 0 {
        return Err(Error::contract("confusion matrix needs at least one class"));
    }
    let mut counts = vec![0u64; k * k];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::contract(format!("class index out of range: pred {p}, label {t}, K={k}")));
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

/// Multiclass Matthews correlation (Gorodkin's R_K); 0 when the denominator vanishes.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    let c = cm.trace() as f64;
    let p: Vec<f64> = cm.col_sums().iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = cm.row_sums().iter().map(|&v| v as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|v| v * v).sum();
    let tt: f64 = t.iter().map(|v| v * v).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 { 0.0 } else { (c * s - pt) / denom }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 { 0.0 } else { num / den }
}

/// Precision, recall and F1 per class; every 0/0 is 0.
pub fn per_class_prf(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    let (rows, cols) = (cm.row_sums(), cm.col_sums());
    (0..cm.classes())
        .map(|k| {
            let tp = cm.get(k, k) as f64;
            let precision = ratio(tp, cols[k] as f64);
            let recall = ratio(tp, rows[k] as f64);
            ClassScores { precision, recall, f1: ratio(2.0 * precision * recall, precision + recall), support: rows[k] }
        })
        .collect()
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(cm: &ConfusionMatrix) -> f64 {
    let scores = per_class_prf(cm);
    let total: u64 = scores.iter().map(|s| s.support).sum();
    ratio(scores.iter().map(|s| s.f1 * s.support as f64).sum(), total as f64)
}

/// Headline metrics for one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub mcc: f64,
    pub f1: f64,
    pub per_class: Vec<ClassScores>,
}

impl MetricsReport {
    pub fn new(preds: &[usize], labels: &[usize], k: usize) -> Result<Self> {
        let confusion = confusion(preds, labels, k)?;
        Ok(MetricsReport {
            accuracy: confusion.accuracy(),
            mcc: mcc(&confusion),
            f1: weighted_f1(&confusion),
            per_class: per_class_prf(&confusion),
            confusion,
        })
    }
}
