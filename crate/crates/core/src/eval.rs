//! Bad-pixel, average-error and RMS metrics.

use crate::grid::Grid;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction and ground truth dimensions differ")]
    DimensionMismatch,
    #[error("no pixel has both ground truth and a prediction")]
    NoGroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// `(threshold, percentage of evaluated pixels with error > threshold)`,
    /// in the order the thresholds were given.
    pub bad: Vec<(f64, f64)>,
    pub avgerr: f64,
    pub rms: f64,
    /// Pixels evaluated.
    pub count: usize,
    /// Pixels with ground truth but a non-finite prediction (not evaluated).
    pub missing: usize,
}

impl MetricReport {
    pub fn bad_at(&self, threshold: f64) -> Option<f64> {
        self.bad
            .iter()
            .find(|(t, _)| *t == threshold)
            .map(|&(_, p)| p)
    }

    /// `metric=value` per line.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (t, p) in &self.bad {
            let _ = writeln!(out, "bad{}={p}", format_threshold(*t));
        }
        let _ = writeln!(out, "avgerr={}", self.avgerr);
        let _ = writeln!(out, "rms={}", self.rms);
        let _ = writeln!(out, "count={}", self.count);
        let _ = writeln!(out, "missing={}", self.missing);
        out
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["name".to_string()];
        cols.extend(
            self.bad
                .iter()
                .map(|(t, _)| format!("bad{}", format_threshold(*t))),
        );
        cols.extend(["avgerr", "rms", "count", "missing"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self, name: &str) -> String {
        let mut cols = vec![name.to_string()];
        cols.extend(self.bad.iter().map(|(_, p)| p.to_string()));
        cols.push(self.avgerr.to_string());
        cols.push(self.rms.to_string());
        cols.push(self.count.to_string());
        cols.push(self.missing.to_string());
        cols.join(",")
    }
}

fn format_threshold(t: f64) -> String {
    format!("{t}")
}

/// Metrics of `|pred − gt|` over pixels where `gt_valid` holds and the
/// prediction is finite. A pixel is bad when its error strictly exceeds the
/// threshold.
pub fn evaluate(
    pred: &Grid<f64>,
    gt: &Grid<f64>,
    gt_valid: &Grid<bool>,
    thresholds: &[f64],
) -> Result<MetricReport, EvalError> {
    if !pred.same_dims(gt) || !gt.same_dims(gt_valid) {
        return Err(EvalError::DimensionMismatch);
    }
    let mut bad_counts = vec![0usize; thresholds.len()];
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    let mut missing = 0usize;
    for ((&p, &g), &ok) in pred.iter().zip(gt.iter()).zip(gt_valid.iter()) {
        if !ok {
            continue;
        }
        if !p.is_finite() {
            missing += 1;
            continue;
        }
        let err = (p - g).abs();
        for (c, &t) in bad_counts.iter_mut().zip(thresholds) {
            if err > t {
                *c += 1;
            }
        }
        abs_sum += err;
        sq_sum += err * err;
        count += 1;
    }
    if count == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let n = count as f64;
    Ok(MetricReport {
        bad: thresholds
            .iter()
            .zip(bad_counts)
            .map(|(&t, c)| (t, 100.0 * c as f64 / n))
            .collect(),
        avgerr: abs_sum / n,
        rms: (sq_sum / n).sqrt(),
        count,
        missing,
    })
}

/// 1 where `m ≥ threshold`, else 0.
pub fn binarize_confidence(m: &Grid<f64>, threshold: f64) -> Grid<f64> {
    m.map(|&v| if v >= threshold { 1.0 } else { 0.0 })
}
