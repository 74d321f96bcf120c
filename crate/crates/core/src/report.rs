//! Report tables rendered as CSV and as aligned markdown.

use std::fmt::Write as _;

use crate::metrics::MetricsReport;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Table { headers: headers.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    /// Appends a row; short rows are padded with empty cells.
    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let mut row: Vec<String> = row.into_iter().map(Into::into).collect();
        row.resize(self.headers.len().max(row.len()), String::new());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for line in std::iter::once(&self.headers).chain(&self.rows) {
            let cells: Vec<String> = line.iter().map(|c| csv_field(c)).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    /// Markdown table padded so columns line up in plain text.
    pub fn to_markdown(&self) -> String {
        let cols = self.headers.len();
        let width: Vec<usize> = (0..cols)
            .map(|c| {
                std::iter::once(&self.headers)
                    .chain(&self.rows)
                    .map(|r| r.get(c).map_or(0, |s| s.chars().count()))
                    .max()
                    .unwrap_or(0)
                    .max(3)
            })
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> = (0..cols).map(|c| format!("{:<w$}", cells.get(c).map_or("", String::as_str), w = width[c])).collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let mut out = line(&self.headers);
        let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
        let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

/// Cross-validation summary: one row per metric, one column per fold, then the mean.
pub fn kfold_table(folds: &[MetricsReport]) -> Table {
    let mut headers = vec!["Metric".to_string()];
    headers.extend((1..=folds.len()).map(|i| format!("Fold {i}")));
    headers.push("Average".into());
    let mut t = Table::new(headers);
    type Metric = fn(&MetricsReport) -> f64;
    let metrics: [(&str, Metric); 3] = [("Accuracy", |r| r.accuracy), ("MCC", |r| r.mcc), ("F1", |r| r.f1)];
    for (name, get) in metrics {
        let values: Vec<f64> = folds.iter().map(get).collect();
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        let mut row = vec![name.to_string()];
        row.extend(values.iter().map(|&v| f4(v)));
        row.push(f4(mean));
        t.push(row);
    }
    t
}

/// Per-class precision, recall and F1.
pub fn class_table(report: &MetricsReport, class_names: &[String]) -> Table {
    let mut t = Table::new(["Tumor type", "Precision", "Recall", "F1"]);
    for (k, s) in report.per_class.iter().enumerate() {
        let name = class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
        t.push([name, f4(s.precision), f4(s.recall), f4(s.f1)]);
    }
    t
}

/// One approach in the accuracy and energy comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ApproachRow {
    pub approach: String,
    pub test_accuracy: Option<f64>,
    pub accuracy_10pct: Option<f64>,
    /// Joules per inference, or a lower and upper bound.
    pub energy: Option<(f64, Option<f64>)>,
    pub inferences_per_second: Option<f64>,
}

fn opt(v: Option<f64>, fmt: impl Fn(f64) -> String) -> String {
    v.map(fmt).unwrap_or_else(|| "-".into())
}

pub fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

/// Accuracy, sample efficiency and energy per approach.
pub fn approach_table(rows: &[ApproachRow]) -> Table {
    let mut t = Table::new(["Approach", "Test accuracy", "Test accuracy with 10% training data", "Energy (J/inference)"]);
    for r in rows {
        let energy = match r.energy {
            Some((lo, Some(hi))) => format!("{lo:.4}-{hi:.4}"),
            Some((j, None)) => format!("{j:.4}"),
            None => "-".into(),
        };
        t.push([r.approach.clone(), opt(r.test_accuracy, pct), opt(r.accuracy_10pct, pct), energy]);
    }
    t
}

/// Inference throughput per approach.
pub fn throughput_table(rows: &[ApproachRow]) -> Table {
    let mut t = Table::new(["Approach", "Inferences per second"]);
    for r in rows {
        t.push([r.approach.clone(), opt(r.inferences_per_second, |v| format!("{v:.1}"))]);
    }
    t
}

/// Test accuracy against the fraction of training data used.
pub fn sample_efficiency_table(points: &[(f64, f64)]) -> Table {
    let mut t = Table::new(["fraction", "test_accuracy"]);
    for &(f, a) in points {
        t.push([format!("{f:.2}"), f4(a)]);
    }
    t
}
