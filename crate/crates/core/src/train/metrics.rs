//! Pixel-level change metrics.
//!
//! `DIP = 1 - sqrt((1 - pre)^2 + (1 - rec)^2) / sqrt(2)`, the normalised
//! distance of the precision-recall point from the ideal `(1, 1)`.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Counts `prob >= threshold` against binary labels.
    pub fn from_probabilities(probs: &[f64], labels: &[f64], threshold: f64) -> Self {
        assert_eq!(probs.len(), labels.len(), "prediction and label lengths differ");
        let mut c = Self::default();
        for (&p, &l) in probs.iter().zip(labels) {
            match (p >= threshold, l >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `(tp / (tp + fp), tp / (tp + fn))`; an empty denominator yields 0.
pub fn precision_recall(c: &ConfusionCounts) -> (f64, f64) {
    (
        ratio(c.tp, c.tp + c.fp).unwrap_or(0.0),
        ratio(c.tp, c.tp + c.fn_).unwrap_or(0.0),
    )
}

pub fn f1_score(pre: f64, rec: f64) -> f64 {
    if pre + rec == 0.0 {
        0.0
    } else {
        2.0 * pre * rec / (pre + rec)
    }
}

pub fn dip_score(pre: f64, rec: f64) -> f64 {
    1.0 - ((1.0 - pre).powi(2) + (1.0 - rec).powi(2)).sqrt() / std::f64::consts::SQRT_2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub dip: f64,
    pub counts: ConfusionCounts,
    /// Set when precision or recall had an empty denominator and was
    /// reported as 0.
    pub degenerate: bool,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let (pre, rec) = precision_recall(&counts);
        let degenerate = counts.tp + counts.fp == 0 || counts.tp + counts.fn_ == 0;
        Self {
            pre,
            rec,
            f1: f1_score(pre, rec),
            dip: dip_score(pre, rec),
            counts,
            degenerate,
        }
    }

    /// Aligned table with percentages to two decimals.
    pub fn table(&self, label: &str) -> String {
        let width = label.len().max(6);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}",
            "Method", "Pre", "Rec", "F1", "DIP"
        );
        let _ = writeln!(
            s,
            "{:<width$}  {:>6.2}  {:>6.2}  {:>6.2}  {:>6.2}",
            label,
            100.0 * self.pre,
            100.0 * self.rec,
            100.0 * self.f1,
            100.0 * self.dip
        );
        if self.degenerate {
            let _ = writeln!(
                s,
                "(degenerate: an empty precision or recall denominator was reported as 0)"
            );
        }
        s
    }
}
