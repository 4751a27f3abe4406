//! Confusion matrices and the precision / recall / F1 / accuracy family.
//!
//! Zero-denominator convention: a metric whose denominator is zero is 0
//! (precision of a never-predicted class, recall of a class without support,
//! F1 when precision and recall are both 0).

use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LabelSpace, EMPTY};

/// Name of the merged animal class in [`collapse_empty`].
pub const NON_EMPTY: &str = "non-empty";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub label_space: LabelSpace,
    /// Row-major `g × g`; rows are true classes, columns predictions.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(label_space: LabelSpace) -> Self {
        let g = label_space.len();
        Self {
            label_space,
            counts: vec![0; g * g],
        }
    }

    pub fn classes(&self) -> usize {
        self.label_space.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes() + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        let g = self.classes();
        self.counts[truth * g + predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes()).map(|p| self.get(k, p)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes()).map(|t| self.get(t, k)).sum()
    }

    pub fn from_rows(label_space: LabelSpace, rows: &[&[u64]]) -> Result<Self> {
        let g = label_space.len();
        if rows.len() != g || rows.iter().any(|r| r.len() != g) {
            return Err(Error::LengthMismatch {
                expected: g,
                found: rows.len(),
            });
        }
        Ok(Self {
            label_space,
            counts: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn to_csv(&self) -> String {
        let names = self.label_space.classes();
        let mut out = String::from("true\\predicted");
        for n in names {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for (t, n) in names.iter().enumerate() {
            out.push_str(n);
            for p in 0..self.classes() {
                let _ = write!(out, ",{}", self.get(t, p));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion<S: AsRef<str>>(
    truth: &[S],
    predicted: &[S],
    label_space: &LabelSpace,
) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(label_space.clone());
    for (t, p) in truth.iter().zip(predicted) {
        cm.add(
            label_space.require(t.as_ref())?,
            label_space.require(p.as_ref())?,
        );
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Recall,
    Precision,
    #[default]
    F1,
    Accuracy,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Recall => "recall",
            MetricKind::Precision => "precision",
            MetricKind::F1 => "f1",
            MetricKind::Accuracy => "accuracy",
        })
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall" => Ok(MetricKind::Recall),
            "precision" => Ok(MetricKind::Precision),
            "f1" => Ok(MetricKind::F1),
            "accuracy" => Ok(MetricKind::Accuracy),
            other => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub total: u64,
}

impl MetricReport {
    /// Support-weighted value of `kind` (accuracy is returned as is).
    pub fn weighted(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Recall => self.weighted_recall,
            MetricKind::Precision => self.weighted_precision,
            MetricKind::F1 => self.weighted_f1,
            MetricKind::Accuracy => self.accuracy,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.class, c.precision, c.recall, c.f1, c.support
            );
        }
        let _ = writeln!(
            out,
            "weighted,{},{},{},{}",
            self.weighted_precision, self.weighted_recall, self.weighted_f1, self.total
        );
        let _ = writeln!(out, "accuracy,,,{},{}", self.accuracy, self.total);
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .per_class
            .iter()
            .map(|c| c.class.len())
            .max()
            .unwrap_or(0)
            .max(8);
        writeln!(f, "{:<width$}  precision  recall     f1  support", "class")?;
        for c in &self.per_class {
            writeln!(
                f,
                "{:<width$}  {:>9.3}  {:>6.3}  {:>5.3}  {:>7}",
                c.class, c.precision, c.recall, c.f1, c.support
            )?;
        }
        writeln!(
            f,
            "{:<width$}  {:>9.3}  {:>6.3}  {:>5.3}  {:>7}",
            "weighted", self.weighted_precision, self.weighted_recall, self.weighted_f1, self.total
        )?;
        write!(f, "accuracy {:.3} over {} items", self.accuracy, self.total)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let g = cm.classes();
    let mut per_class = Vec::with_capacity(g);
    let (mut wp, mut wr, mut wf, mut correct) = (0.0, 0.0, 0.0, 0u64);
    for k in 0..g {
        let diag = cm.get(k, k);
        let support = cm.row_sum(k);
        let predicted = cm.col_sum(k);
        let precision = ratio(diag, predicted);
        let recall = ratio(diag, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let s = support as f64;
        wp += s * precision;
        // support·diag/support is exact in f64, so weighted recall equals accuracy bit for bit.
        if support > 0 {
            wr += s * diag as f64 / s;
        }
        wf += s * f1;
        correct += diag;
        per_class.push(ClassMetrics {
            class: cm.label_space.name(k).to_string(),
            precision,
            recall,
            f1,
            support,
        });
    }
    let n = total as f64;
    Ok(MetricReport {
        accuracy: correct as f64 / n,
        per_class,
        weighted_precision: wp / n,
        weighted_recall: wr / n,
        weighted_f1: wf / n,
        total,
    })
}

/// Merge every non-empty class into one: a 2×2 matrix over `[empty, non-empty]`.
pub fn collapse_empty(cm: &ConfusionMatrix) -> ConfusionMatrix {
    let space = LabelSpace::new([EMPTY, NON_EMPTY]).expect("static label space");
    let e = cm.label_space.empty_index();
    let bin = |k: usize| usize::from(k != e);
    let mut out = ConfusionMatrix::zeros(space);
    let g = cm.classes();
    for t in 0..g {
        for p in 0..g {
            out.counts[bin(t) * 2 + bin(p)] += cm.get(t, p);
        }
    }
    out
}

pub fn write_report_csv(report: &MetricReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}
