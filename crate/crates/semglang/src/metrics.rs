//! Shared statistics: rank-frequency tables, Zipf exponent fitting,
//! divergences, and accuracy aggregation.

use serde::Serialize;
use thiserror::Error;

use crate::net::js_divergence_raw;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {needed} ranks with nonzero count, got {got}")]
    InsufficientRanks { needed: usize, got: usize },
    #[error("prediction/label length mismatch: {predictions} vs {labels}")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("empty input")]
    Empty,
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(u32, usize),
}

/// Token usage sorted by count (descending; ties by token id). Zero-count
/// tokens are kept out of the table and reported as `dead_tokens`.
#[derive(Debug, Clone, Serialize)]
pub struct RankFrequencyTable {
    /// (token id, count, rank) with rank starting at 1.
    pub rows: Vec<(usize, u64, usize)>,
    pub total: u64,
    pub dead_tokens: usize,
}

impl RankFrequencyTable {
    pub fn from_counts(counts: &[u64]) -> Self {
        let mut live: Vec<(usize, u64)> = counts
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, c)| *c > 0)
            .collect();
        live.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let total = live.iter().map(|(_, c)| c).sum();
        let rows = live
            .into_iter()
            .enumerate()
            .map(|(i, (token, count))| (token, count, i + 1))
            .collect();
        Self {
            rows,
            total,
            dead_tokens: counts.len() - counts.iter().filter(|&&c| c > 0).count(),
        }
    }
}

/// The normalized Zipf distribution over `k` ranks: p(rank) proportional to
/// rank^(-exponent), rank = 1..=k.
pub fn zipf_distribution(k: usize, exponent: f64) -> Vec<f64> {
    let mut weights: Vec<f64> = (1..=k).map(|r| (r as f64).powf(-exponent)).collect();
    let z: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= z);
    weights
}

/// Ordinary least squares of ln(count) on ln(rank); returns the negated
/// slope (the Zipf exponent) and the coefficient of determination.
pub fn fit_zipf_exponent(table: &RankFrequencyTable) -> Result<(f64, f64), MetricsError> {
    let n = table.rows.len();
    if n < 3 {
        return Err(MetricsError::InsufficientRanks { needed: 3, got: n });
    }
    let xs: Vec<f64> = table.rows.iter().map(|(_, _, r)| (*r as f64).ln()).collect();
    let ys: Vec<f64> = table.rows.iter().map(|(_, c, _)| (*c as f64).ln()).collect();
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    // All-equal counts give syy = 0: a flat, perfectly fitted line.
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    Ok((-slope, r2))
}

/// Jensen-Shannon divergence (natural log, bounded by ln 2).
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    js_divergence_raw(p, q)
}

/// Per-class and aggregate accuracy over one or more (predictions, labels)
/// runs, e.g. repeats of the pipeline under different seeds. The confusion
/// matrix pools all runs; the standard deviation is the sample deviation of
/// per-run overall accuracy (zero for a single run).
#[derive(Debug, Clone, Serialize)]
pub struct AccuracyReport {
    pub class_names: Vec<String>,
    pub per_class_accuracy: Vec<f64>,
    pub macro_accuracy: f64,
    pub overall_accuracy: f64,
    pub std_over_runs: f64,
    pub per_run_accuracy: Vec<f64>,
    /// confusion[actual][predicted], pooled over runs.
    pub confusion: Vec<Vec<u64>>,
}

pub fn accuracy_report(
    runs: &[(Vec<u32>, Vec<u32>)],
    class_names: &[String],
) -> Result<AccuracyReport, MetricsError> {
    if runs.is_empty() || runs.iter().all(|(p, _)| p.is_empty()) {
        return Err(MetricsError::Empty);
    }
    let nc = class_names.len();
    let mut confusion = vec![vec![0u64; nc]; nc];
    let mut per_run = Vec::with_capacity(runs.len());
    for (preds, labels) in runs {
        if preds.len() != labels.len() {
            return Err(MetricsError::LengthMismatch {
                predictions: preds.len(),
                labels: labels.len(),
            });
        }
        let mut hit = 0u64;
        for (&p, &l) in preds.iter().zip(labels) {
            if p as usize >= nc {
                return Err(MetricsError::LabelOutOfRange(p, nc));
            }
            if l as usize >= nc {
                return Err(MetricsError::LabelOutOfRange(l, nc));
            }
            confusion[l as usize][p as usize] += 1;
            if p == l {
                hit += 1;
            }
        }
        if !preds.is_empty() {
            per_run.push(hit as f64 / preds.len() as f64);
        }
    }
    let mut per_class = Vec::with_capacity(nc);
    for c in 0..nc {
        let row_total: u64 = confusion[c].iter().sum();
        per_class.push(if row_total > 0 {
            confusion[c][c] as f64 / row_total as f64
        } else {
            0.0
        });
    }
    let grand: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..nc).map(|c| confusion[c][c]).sum();
    let overall = trace as f64 / grand as f64;
    let macro_acc = per_class.iter().sum::<f64>() / nc as f64;
    let std = if per_run.len() > 1 {
        let mean = per_run.iter().sum::<f64>() / per_run.len() as f64;
        let var = per_run.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
            / (per_run.len() - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    Ok(AccuracyReport {
        class_names: class_names.to_vec(),
        per_class_accuracy: per_class,
        macro_accuracy: macro_acc,
        overall_accuracy: overall,
        std_over_runs: std,
        per_run_accuracy: per_run,
        confusion,
    })
}
