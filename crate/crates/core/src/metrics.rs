//! Accuracy, confusion matrices, one-vs-rest ROC/AUC and JSON reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::predict;
use crate::numfmt::sig;
use crate::tensor::Tensor;

fn check_lengths(op: &str, pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Usage(format!(
            "{op}: {} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Usage(format!("{op}: no samples")));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths("accuracy", pred, truth)?;
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.trace() as f64 / n as f64)
    }

    /// Diagonal over row sum; `None` for a class with no true samples.
    pub fn recall(&self, c: usize) -> Option<f64> {
        let row: u64 = self.counts[c].iter().sum();
        (row > 0).then(|| self.counts[c][c] as f64 / row as f64)
    }

    /// Diagonal over column sum; `None` for a class never predicted.
    pub fn precision(&self, c: usize) -> Option<f64> {
        let col: u64 = self.counts.iter().map(|r| r[c]).sum();
        (col > 0).then(|| self.counts[c][c] as f64 / col as f64)
    }

    /// `None` when precision or recall is undefined or both are zero.
    pub fn f1(&self, c: usize) -> Option<f64> {
        let (p, r) = (self.precision(c)?, self.recall(c)?);
        (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
    }
}

pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    check_lengths("confusion", pred, truth)?;
    let mut counts = vec![vec![0; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::Data(format!(
                "class index {} out of range for {classes} classes",
                p.max(t)
            )));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// One-vs-rest ROC for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score;
    /// empty when the class is degenerate.
    pub points: Vec<(f64, f64)>,
    /// Mann-Whitney AUC with ties worth one half; `None` without both
    /// positives and negatives.
    pub auc: Option<f64>,
}

/// ROC of column `class` of `scores: N×K` against `truth`.
pub fn roc_auc(scores: &Tensor, truth: &[usize], class: usize) -> Result<RocCurve> {
    let (n, k) = scores.dims2("roc_auc")?;
    if truth.len() != n {
        return Err(Error::Usage(format!("roc_auc: {n} score rows for {} labels", truth.len())));
    }
    if class >= k {
        return Err(Error::Usage(format!("roc_auc: class {class} out of range for {k} columns")));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= k) {
        return Err(Error::Data(format!("label {t} out of range for {k} classes")));
    }
    let col: Vec<f32> = (0..n).map(|i| scores.data()[i * k + class]).collect();
    if col.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("roc_auc: NaN score".into()));
    }
    let positive: Vec<bool> = truth.iter().map(|&t| t == class).collect();
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Ok(RocCurve {
            points: Vec::new(),
            auc: None,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
    // average 1-based ranks over tied groups
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && col[order[j + 1]] == col[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&s| positive[s]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    let auc = u / (pos as f64 * neg as f64);

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = n;
    while i > 0 {
        let score = col[order[i - 1]];
        while i > 0 && col[order[i - 1]] == score {
            if positive[order[i - 1]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i -= 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve { points, auc: Some(auc) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub model: String,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub n: usize,
}

/// Metrics of `probabilities: N×K` against `truth`; predictions are row
/// argmaxes with ties to the lowest class.
pub fn build_report(model: &str, class_names: &[String], probabilities: &Tensor, truth: &[usize]) -> Result<Report> {
    let (n, k) = probabilities.dims2("report")?;
    if class_names.len() != k {
        return Err(Error::Usage(format!("{} class names for {k} probability columns", class_names.len())));
    }
    let pred = predict(probabilities)?;
    let cm = confusion(&pred, truth, k)?;
    let per_class = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            Ok(ClassMetrics {
                name: name.clone(),
                precision: cm.precision(c),
                recall: cm.recall(c),
                f1: cm.f1(c),
                auc: roc_auc(probabilities, truth, c)?.auc,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Report {
        model: model.to_string(),
        accuracy: cm.trace() as f64 / n as f64,
        per_class,
        confusion: cm,
        n,
    })
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => sig(x, 6),
        _ => "null".into(),
    }
}

fn string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialise")
}

impl Report {
    /// Fixed key order, floats at six significant digits, undefined values
    /// as `null`.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n");
        let _ = writeln!(out, "  \"model\": {},", string(&self.model));
        let _ = writeln!(out, "  \"accuracy\": {},", num(Some(self.accuracy)));
        out.push_str("  \"per_class\": [\n");
        for (i, c) in self.per_class.iter().enumerate() {
            let _ = write!(
                out,
                "    {{\"name\": {}, \"precision\": {}, \"recall\": {}, \"f1\": {}, \"auc\": {}}}",
                string(&c.name),
                num(c.precision),
                num(c.recall),
                num(c.f1),
                num(c.auc)
            );
            out.push_str(if i + 1 < self.per_class.len() { ",\n" } else { "\n" });
        }
        out.push_str("  ],\n  \"confusion\": [");
        for (i, row) in self.confusion.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = write!(out, "{}[{}]", if i == 0 { "" } else { ", " }, cells.join(", "));
        }
        let _ = write!(out, "],\n  \"n\": {}\n}}\n", self.n);
        out
    }
}

pub fn emit_report(report: &Report, path: &Path) -> Result<()> {
    write_atomic(path, report.to_json().as_bytes())
}
