//! Holdout accuracy metrics for throughput models.

use serde::{Deserialize, Serialize};

use super::{PerfModel, ProfileDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub r2: f64,
    /// Mean absolute percentage error, in percent.
    pub mape: f64,
    /// Mean absolute error, in iterations per second.
    pub mae: f64,
    pub samples: usize,
}

/// Scores `model` on every throughput row of `holdout`.
pub fn validate(model: &dyn PerfModel, holdout: &ProfileDataset) -> Result<ModelMetrics> {
    let pairs: Vec<(f64, f64)> = holdout
        .ips
        .iter()
        .map(|s| {
            (
                s.ips,
                model.predict_ips(s.tp, s.batch, s.kv_blocks, s.freq_mhz as f64),
            )
        })
        .collect();
    metrics_from_pairs(&pairs)
}

/// Metrics over `(actual, predicted)` pairs.
pub fn metrics_from_pairs(pairs: &[(f64, f64)]) -> Result<ModelMetrics> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("holdout set is empty".into()));
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let ss_tot: f64 = pairs.iter().map(|p| (p.0 - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let ss_res: f64 = pairs.iter().map(|p| (p.0 - p.1).powi(2)).sum();
    let mae = pairs.iter().map(|p| (p.0 - p.1).abs()).sum::<f64>() / n;
    let mape = pairs.iter().map(|p| ((p.0 - p.1) / p.0).abs()).sum::<f64>() / n * 100.0;
    Ok(ModelMetrics {
        r2: 1.0 - ss_res / ss_tot,
        mape,
        mae,
        samples: pairs.len(),
    })
}
