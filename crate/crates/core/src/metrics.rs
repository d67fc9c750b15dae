//! Error statistics for AP coordinates, ranging and positioning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{distance, FixSeries, Point2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("key sets differ: only in estimate {only_est:?}, only in truth {only_truth:?}")]
    KeyMismatch {
        only_est: Vec<String>,
        only_truth: Vec<String>,
    },
    #[error("length mismatch: {estimates} estimates vs {truth} truth points")]
    LengthMismatch { estimates: usize, truth: usize },
    #[error("no samples")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mae: f64,
    pub rmse: f64,
    pub max: f64,
}

/// Empirical CDF point: `fraction` of samples have error `<= error`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub error: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub summary: ErrorSummary,
    pub cdf: Vec<CdfPoint>,
}

pub fn summarize(errors: &[f64]) -> Result<ErrorSummary, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = errors.len() as f64;
    let mae = errors.iter().sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let max = errors.iter().copied().fold(0.0, f64::max);
    Ok(ErrorSummary { mae, rmse, max })
}

/// Step-function CDF with one point per distinct error value.
pub fn empirical_cdf(errors: &[f64]) -> Vec<CdfPoint> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, &e) in sorted.iter().enumerate() {
        let fraction = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.error == e => last.fraction = fraction,
            _ => out.push(CdfPoint { error: e, fraction }),
        }
    }
    out
}

fn report(errors: &[f64]) -> Result<ErrorReport, MetricsError> {
    Ok(ErrorReport {
        summary: summarize(errors)?,
        cdf: empirical_cdf(errors),
    })
}

/// Euclidean errors of estimated AP coordinates against the truth.
pub fn coord_errors(
    est: &BTreeMap<String, Point2>,
    truth: &BTreeMap<String, Point2>,
) -> Result<ErrorSummary, MetricsError> {
    let only_est: Vec<String> = est.keys().filter(|k| !truth.contains_key(*k)).cloned().collect();
    let only_truth: Vec<String> = truth.keys().filter(|k| !est.contains_key(*k)).cloned().collect();
    if !only_est.is_empty() || !only_truth.is_empty() {
        return Err(MetricsError::KeyMismatch { only_est, only_truth });
    }
    let errors: Vec<f64> = est.iter().map(|(k, &p)| distance(p, truth[k])).collect();
    summarize(&errors)
}

/// Absolute errors of `(estimated distance, true distance)` pairs.
pub fn ranging_errors(calibrated: &[(f64, f64)]) -> Result<ErrorReport, MetricsError> {
    let errors: Vec<f64> = calibrated.iter().map(|(d, t)| (d - t).abs()).collect();
    report(&errors)
}

/// Per-fix Euclidean errors; `truth` must already be aligned with the fixes.
pub fn positioning_errors(fixes: &FixSeries, truth: &[Point2]) -> Result<ErrorReport, MetricsError> {
    if fixes.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            estimates: fixes.len(),
            truth: truth.len(),
        });
    }
    let errors: Vec<f64> = fixes.positions().zip(truth).map(|(e, &t)| distance(e, t)).collect();
    report(&errors)
}

/// Picks the truth point for every fix from a full per-step trajectory.
pub fn align_truth(fixes: &FixSeries, trajectory: &[Point2], first_step: usize) -> Result<Vec<Point2>, MetricsError> {
    fixes
        .fixes
        .iter()
        .map(|f| {
            f.step
                .checked_sub(first_step)
                .and_then(|i| trajectory.get(i).copied())
                .ok_or(MetricsError::LengthMismatch {
                    estimates: fixes.len(),
                    truth: trajectory.len(),
                })
        })
        .collect()
}
