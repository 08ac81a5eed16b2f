//! Performance and power models.
//!
//! The controllers only depend on the [`PerfModel`] contract: given the engine
//! size, batch size, allocated KV blocks and GPU frequency, predict decode
//! iterations per second. Two implementations ship with the crate: an
//! analytic [`surrogate::SurrogateModel`] and a table-driven
//! [`grid::GridModel`] fitted from profiling data.

pub mod dataset;
pub mod grid;
pub mod metrics;
pub mod surrogate;

use std::fmt::Debug;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{IpsSample, PowerSample, ProfileDataset};
pub use grid::{FittedModels, GridModel, GridPower};
pub use metrics::{validate, ModelMetrics};
pub use surrogate::{PowerParams, ReferencePower, SurrogateModel, SurrogateParams};

/// Predicts decode throughput in iterations per second.
pub trait PerfModel: Send + Sync + Debug {
    fn predict_ips(&self, tp: u32, batch: u32, kv_blocks: u32, freq_mhz: f64) -> f64;

    /// Whether `predict_ips` is nondecreasing in frequency for every fixed
    /// `(tp, batch, kv)`. Binary search over frequency relies on this.
    fn monotone_in_freq(&self) -> bool;
}

/// Per-GPU power draw.
pub trait PowerModel: Send + Sync + Debug {
    /// Watts drawn by one GPU at `freq_mhz` holding `kv_blocks` KV blocks.
    fn predict_power(&self, freq_mhz: f64, kv_blocks: f64) -> f64;

    /// Watts drawn by one GPU with no work scheduled.
    fn idle_power(&self) -> f64;
}

/// Power of a `tp`-GPU engine whose KV blocks are sharded evenly.
pub fn engine_power(model: &dyn PowerModel, tp: u32, freq_mhz: f64, kv_blocks: u32) -> f64 {
    tp as f64 * model.predict_power(freq_mhz, kv_blocks as f64 / tp as f64)
}

pub fn engine_idle_power(model: &dyn PowerModel, tp: u32) -> f64 {
    tp as f64 * model.idle_power()
}

/// Discrete set of settable GPU clocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyDomain {
    pub min_mhz: u32,
    pub max_mhz: u32,
    pub step_mhz: u32,
}

impl Default for FrequencyDomain {
    fn default() -> Self {
        Self {
            min_mhz: 210,
            max_mhz: 1410,
            step_mhz: 15,
        }
    }
}

impl FrequencyDomain {
    pub fn new(min_mhz: u32, max_mhz: u32, step_mhz: u32) -> Result<Self> {
        let d = Self {
            min_mhz,
            max_mhz,
            step_mhz,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_mhz == 0
            || self.min_mhz >= self.max_mhz
            || !(self.max_mhz - self.min_mhz).is_multiple_of(self.step_mhz)
        {
            return Err(Error::InvalidArgument(format!(
                "frequency domain needs min < max and (max - min) divisible by step: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        ((self.max_mhz - self.min_mhz) / self.step_mhz) as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Level `i` in ascending order.
    pub fn level(&self, i: usize) -> u32 {
        debug_assert!(i < self.len());
        self.min_mhz + i as u32 * self.step_mhz
    }

    pub fn levels(&self) -> Vec<u32> {
        (0..self.len()).map(|i| self.level(i)).collect()
    }

    pub fn contains(&self, mhz: u32) -> bool {
        mhz >= self.min_mhz
            && mhz <= self.max_mhz
            && (mhz - self.min_mhz).is_multiple_of(self.step_mhz)
    }
}

/// Pre-characterised capacity of one tensor-parallel engine size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineProfile {
    pub tp: u32,
    /// Highest request rate sustained without long tail latencies.
    pub max_load_rps: f64,
    /// p99 end-to-end latency target in seconds.
    pub e2e_slo: f64,
    pub kv_capacity: u32,
    /// Seconds from spawn request until the engine can serve.
    pub spawn_time: f64,
}

impl EngineProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tp > 0
            && self.max_load_rps > 0.0
            && self.e2e_slo > 0.0
            && self.kv_capacity > 0
            && self.spawn_time > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "engine profile fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Checks a profile set and returns it sorted by tp.
pub fn validate_profiles(profiles: &[EngineProfile]) -> Result<Vec<EngineProfile>> {
    if profiles.is_empty() {
        return Err(Error::InvalidArgument("no engine profiles".into()));
    }
    let mut sorted = profiles.to_vec();
    for p in &sorted {
        p.validate()?;
    }
    sorted.sort_by_key(|p| p.tp);
    for w in sorted.windows(2) {
        if w[0].tp == w[1].tp {
            return Err(Error::InvalidArgument(format!("duplicate tp {}", w[0].tp)));
        }
        if !(w[0].max_load_rps < w[1].max_load_rps) {
            return Err(Error::InvalidArgument(format!(
                "max_load_rps must increase with tp (tp{} {} >= tp{} {})",
                w[0].tp, w[0].max_load_rps, w[1].tp, w[1].max_load_rps
            )));
        }
    }
    Ok(sorted)
}

/// Models used by one simulation run.
///
/// `engine` is the ground truth that times simulated iterations; `predictor`
/// is what the scheduler and throttle consult. They are the same object for
/// an exact-model run.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub engine: Arc<dyn PerfModel>,
    pub predictor: Arc<dyn PerfModel>,
    pub power: Arc<dyn PowerModel>,
}

impl ModelSet {
    pub fn exact(perf: Arc<dyn PerfModel>, power: Arc<dyn PowerModel>) -> Self {
        Self {
            engine: perf.clone(),
            predictor: perf,
            power,
        }
    }

    /// Default surrogate and reference power model.
    pub fn reference() -> Self {
        let perf = SurrogateModel::new(SurrogateParams::default()).expect("valid defaults");
        let power = ReferencePower::new(PowerParams::default()).expect("valid defaults");
        Self::exact(Arc::new(perf), Arc::new(power))
    }
}

#[derive(Debug, Clone, Deserialize)]
struct Presets {
    #[allow(dead_code)]
    version: u32,
    profiles: std::collections::BTreeMap<String, Vec<EngineProfile>>,
}

fn presets() -> &'static Presets {
    static PRESETS: OnceLock<Presets> = OnceLock::new();
    PRESETS.get_or_init(|| {
        serde_json::from_str(include_str!("profiles.json")).expect("embedded profiles parse")
    })
}

/// Named engine profile sets (`llama2-13b`, `llama3-8b`, `llama3-70b`).
pub fn profile_preset(name: &str) -> Option<Vec<EngineProfile>> {
    presets().profiles.get(name).cloned()
}

pub fn profile_preset_names() -> Vec<String> {
    presets().profiles.keys().cloned().collect()
}
