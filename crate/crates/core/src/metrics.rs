//! Confusion matrices, macro-averaged scores and inference timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archzoo::Model;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Stats(format!(
                "{} counts for a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|r| self.get(r, c)).sum()
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|r| {
                let s = self.row_sum(r) as f64;
                (0..self.classes)
                    .map(|c| if s > 0.0 { self.get(r, c) as f64 / s } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Relabels class `i` as `perm[i]` on both axes.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.classes);
        for t in 0..self.classes {
            for p in 0..self.classes {
                out.counts[perm[t] * self.classes + perm[p]] = self.get(t, p);
            }
        }
        out
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Stats(format!(
            "{} labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t >= classes || p >= classes {
            return Err(Error::Stats(format!(
                "sample {i}: label {t} / prediction {p} out of range for {classes} classes"
            )));
        }
        cm.counts[t * classes + p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<u64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

pub const REPORT_CSV_HEADER: &str = "model,stage,accuracy,macro_precision,macro_recall,macro_f1";

impl MetricsReport {
    pub fn csv_row(&self, model: &str, stage: &str) -> String {
        format!(
            "{model},{stage},{:.6},{:.6},{:.6},{:.6}",
            self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1
        )
    }
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Per-class and macro precision/recall/F1. Zero denominators give 0 and the
/// class still counts in the macro mean.
pub fn macro_scores(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let c = cm.classes();
    let total = cm.total();
    if c == 0 || total == 0 {
        return Err(Error::Stats("empty confusion matrix".into()));
    }
    let mut precision = Vec::with_capacity(c);
    let mut recall = Vec::with_capacity(c);
    let mut f1 = Vec::with_capacity(c);
    let mut support = Vec::with_capacity(c);
    let mut trace = 0;
    for k in 0..c {
        let tp = cm.get(k, k);
        trace += tp;
        let p = ratio(tp, cm.col_sum(k));
        let r = ratio(tp, cm.row_sum(k));
        precision.push(p);
        recall.push(r);
        f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
        support.push(cm.row_sum(k));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / c as f64;
    Ok(MetricsReport {
        accuracy: trace as f64 / total as f64,
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        precision,
        recall,
        f1,
        support,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub warmup: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Sample standard deviation.
    pub std_ms: f64,
    /// Every timed run, in order.
    pub runs_ms: Vec<f64>,
}

impl TimingReport {
    pub fn from_runs(warmup: usize, runs_ms: Vec<f64>) -> Self {
        let n = runs_ms.len();
        let mean = if n == 0 { 0.0 } else { runs_ms.iter().sum::<f64>() / n as f64 };
        let mut sorted = runs_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        let std = if n < 2 {
            0.0
        } else {
            (runs_ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            warmup,
            mean_ms: mean,
            median_ms: median,
            std_ms: std,
            runs_ms,
        }
    }
}

pub const TIMING_WARMUP: usize = 20;
pub const TIMING_RUNS: usize = 400;

/// Times `f` after `warmup` untimed calls.
pub fn time_fn<F: FnMut() -> Result<()>>(mut f: F, warmup: usize, runs: usize) -> Result<TimingReport> {
    for _ in 0..warmup {
        f()?;
    }
    let mut out = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        f()?;
        out.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(TimingReport::from_runs(warmup, out))
}

/// Per-sample inference latency with batch size 1.
pub fn time_inference<T: Scalar>(model: &Model<T>, warmup: usize, runs: usize) -> Result<TimingReport> {
    let s = model.spec().input_size;
    let x = Tensor::<T>::zeros(&[1, model.spec().channels, s, s]);
    time_fn(
        || {
            std::hint::black_box(model.predict(&x)?);
            Ok(())
        },
        warmup,
        runs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_tally() {
        let cm = confusion(&[0, 1, 1, 2, 0, 2], &[0, 0, 1, 2, 0, 2], 3).unwrap();
        assert_eq!(cm.get(1, 0), 1);
        assert_eq!(cm.get(0, 0), 2);
        assert_eq!(cm.get(1, 1), 1);
        assert_eq!(cm.get(2, 2), 2);
        assert_eq!(cm.total(), 6);
        assert!(confusion(&[3], &[0], 3).is_err());
        assert_eq!(confusion(&[], &[], 4).unwrap().total(), 0);
    }

    #[test]
    fn hand_computed_scores() {
        let cm = ConfusionMatrix::from_counts(3, vec![2, 0, 0, 1, 1, 0, 0, 0, 2]).unwrap();
        let r = macro_scores(&cm).unwrap();
        assert!((r.f1[0] - 0.8).abs() < 1e-12);
        assert!((r.f1[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1[2] - 1.0).abs() < 1e-12);
        assert!((r.macro_f1 - (0.8 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-12);
        assert!((r.accuracy - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_and_empty() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        let r = macro_scores(&cm).unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));
        assert!(macro_scores(&ConfusionMatrix::zeros(3)).is_err());
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let cm = confusion(&[0, 1], &[0, 0], 2).unwrap();
        let r = macro_scores(&cm).unwrap();
        assert_eq!(r.precision[1], 0.0);
        assert_eq!(r.recall[1], 0.0);
        assert_eq!(r.f1[1], 0.0);
    }

    #[test]
    fn timing_statistics() {
        let t = TimingReport::from_runs(0, vec![1.0, 3.0, 2.0, 10.0]);
        assert_eq!(t.mean_ms, 4.0);
        assert_eq!(t.median_ms, 2.5);
        assert!((t.std_ms - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let mut calls = 0;
        let r = time_fn(|| { calls += 1; Ok(()) }, 3, 5).unwrap();
        assert_eq!(calls, 8);
        assert_eq!(r.runs_ms.len(), 5);
    }
}
