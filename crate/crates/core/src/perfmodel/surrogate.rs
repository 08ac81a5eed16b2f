//! Analytic reference models.
//!
//! Throughput: `IPS = A(tp) * (f / f_max)^alpha / (1 + gamma * (b - 1) + kappa * kv)`,
//! so TBT is affine in both batch size and KV blocks and rises as the clock
//! drops.
//!
//! Power (per GPU): `P = P_idle + c1 * (f / f_max)^3 + c2 * (f / f_max) * kv`.

use serde::{Deserialize, Serialize};

use super::{PerfModel, PowerModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateParams {
    pub f_max_mhz: f64,
    pub alpha: f64,
    /// Relative TBT increase per extra batched request.
    pub gamma: f64,
    /// Relative TBT increase per allocated KV block.
    pub kappa: f64,
    /// `(tp, ips)`: iterations per second at batch 1, no KV, max clock.
    pub amplitude: Vec<(u32, f64)>,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            f_max_mhz: 1410.0,
            alpha: 0.7,
            gamma: 0.010,
            kappa: 0.001,
            amplitude: vec![(1, 38.0), (2, 55.0), (4, 70.0), (8, 60.0)],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateModel {
    params: SurrogateParams,
}

impl SurrogateModel {
    pub fn new(params: SurrogateParams) -> Result<Self> {
        let p = &params;
        let ok = p.f_max_mhz > 0.0
            && p.alpha > 0.0
            && p.alpha <= 1.0
            && p.gamma >= 0.0
            && p.kappa >= 0.0
            && !p.amplitude.is_empty()
            && p.amplitude
                .iter()
                .all(|&(tp, a)| tp > 0 && a > 0.0 && a.is_finite());
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "surrogate needs A > 0, alpha in (0, 1], gamma, kappa >= 0: {p:?}"
            )));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &SurrogateParams {
        &self.params
    }

    pub fn amplitude(&self, tp: u32) -> Option<f64> {
        self.params
            .amplitude
            .iter()
            .find(|&&(t, _)| t == tp)
            .map(|&(_, a)| a)
    }
}

impl PerfModel for SurrogateModel {
    fn predict_ips(&self, tp: u32, batch: u32, kv_blocks: u32, freq_mhz: f64) -> f64 {
        let Some(a) = self.amplitude(tp) else {
            return f64::NAN;
        };
        let p = &self.params;
        let extra = batch.saturating_sub(1) as f64;
        a * (freq_mhz / p.f_max_mhz).powf(p.alpha)
            / (1.0 + p.gamma * extra + p.kappa * kv_blocks as f64)
    }

    fn monotone_in_freq(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerParams {
    pub f_max_mhz: f64,
    /// `P_idle`, watts.
    pub idle_watts: f64,
    /// `c1`, watts at full clock.
    pub freq_watts: f64,
    /// `c2`, watts per KV block at full clock.
    pub kv_watts: f64,
}

impl Default for PowerParams {
    fn default() -> Self {
        Self {
            f_max_mhz: 1410.0,
            idle_watts: 90.0,
            freq_watts: 100.0,
            kv_watts: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReferencePower {
    params: PowerParams,
}

impl ReferencePower {
    pub fn new(params: PowerParams) -> Result<Self> {
        let p = &params;
        if !(p.f_max_mhz > 0.0 && p.idle_watts >= 0.0 && p.freq_watts >= 0.0 && p.kv_watts >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "power model needs non-negative coefficients: {p:?}"
            )));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &PowerParams {
        &self.params
    }
}

impl PowerModel for ReferencePower {
    fn predict_power(&self, freq_mhz: f64, kv_blocks: f64) -> f64 {
        let p = &self.params;
        let x = freq_mhz / p.f_max_mhz;
        p.idle_watts + p.freq_watts * x.powi(3) + p.kv_watts * x * kv_blocks
    }

    fn idle_power(&self) -> f64 {
        self.params.idle_watts
    }
}
