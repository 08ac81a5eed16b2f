//! Tensor-parallelism autoscaling policy.
//!
//! A monitor measures the arrival rate over a sliding window; every tick
//! the smallest engine whose profiled capacity covers that rate is chosen.
//! Upscaling may start at any time. Downscaling waits until the grace
//! period, started when an engine becomes ready and renewed while the
//! current engine is still the right size, has expired.
//!
//! The engine lifecycle itself (spawn, overlap, drain) is driven by the
//! simulator; this module only decides.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perfmodel::EngineProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineChoice {
    pub tp: u32,
    /// The rate exceeds every profile; `tp` is the largest engine.
    pub over_capacity: bool,
}

/// Smallest engine with `max_load_rps >= rps`. `profiles` must be sorted by
/// tp (see [`crate::perfmodel::validate_profiles`]).
pub fn required_engine(rps: f64, profiles: &[EngineProfile]) -> EngineChoice {
    assert!(!profiles.is_empty(), "no engine profiles");
    match profiles.iter().find(|p| p.max_load_rps >= rps) {
        Some(p) => EngineChoice {
            tp: p.tp,
            over_capacity: false,
        },
        None => EngineChoice {
            tp: profiles[profiles.len() - 1].tp,
            over_capacity: true,
        },
    }
}

/// Arrival counter over a sliding window `(now - window, now]`.
#[derive(Debug, Clone)]
pub struct LoadMonitor {
    window: f64,
    arrivals: VecDeque<f64>,
}

impl LoadMonitor {
    pub fn new(window: f64) -> Result<Self> {
        if !(window > 0.0 && window.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "monitor window {window} must be > 0"
            )));
        }
        Ok(Self {
            window,
            arrivals: VecDeque::new(),
        })
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    pub fn record(&mut self, t: f64) {
        self.arrivals.push_back(t);
    }

    pub fn measured_rps(&mut self, now: f64) -> f64 {
        while self
            .arrivals
            .front()
            .is_some_and(|&t| t <= now - self.window)
        {
            self.arrivals.pop_front();
        }
        let n = self.arrivals.iter().take_while(|&&t| t <= now).count();
        n as f64 / self.window
    }
}

/// Window after an engine change during which only upscaling is allowed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GracePeriod {
    pub expires_at: f64,
}

impl GracePeriod {
    pub fn active(&self, now: f64) -> bool {
        now < self.expires_at
    }

    /// Extends (never shortens) the period to `now + duration`.
    pub fn renew(&mut self, now: f64, duration: f64) {
        self.expires_at = self.expires_at.max(now + duration);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleDecision {
    None,
    SpawnLarger(u32),
    SpawnSmaller(u32),
}

/// What the tick saw, for the timeline export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub time: f64,
    pub rps: f64,
    pub required_tp: u32,
    pub over_capacity: bool,
    pub grace_active: bool,
    pub decision: ScaleDecision,
}

impl fmt::Display for ScaleDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScaleDecision::None => write!(f, "none"),
            ScaleDecision::SpawnLarger(tp) => write!(f, "spawn_larger:{tp}"),
            ScaleDecision::SpawnSmaller(tp) => write!(f, "spawn_smaller:{tp}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Autoscaler {
    profiles: Vec<EngineProfile>,
    monitor: LoadMonitor,
    grace: GracePeriod,
}

impl Autoscaler {
    pub fn new(profiles: &[EngineProfile], window: f64) -> Result<Self> {
        Ok(Self {
            profiles: crate::perfmodel::validate_profiles(profiles)?,
            monitor: LoadMonitor::new(window)?,
            grace: GracePeriod::default(),
        })
    }

    pub fn profiles(&self) -> &[EngineProfile] {
        &self.profiles
    }

    pub fn profile(&self, tp: u32) -> Option<&EngineProfile> {
        self.profiles.iter().find(|p| p.tp == tp)
    }

    pub fn window(&self) -> f64 {
        self.monitor.window()
    }

    pub fn grace(&self) -> GracePeriod {
        self.grace
    }

    pub fn record_arrival(&mut self, t: f64) {
        self.monitor.record(t);
    }

    /// An engine of size `tp` became ready at `now`: grace runs for its
    /// spawn time.
    pub fn on_engine_ready(&mut self, tp: u32, now: f64) {
        let d = self.profile(tp).map_or(0.0, |p| p.spawn_time);
        self.grace = GracePeriod {
            expires_at: now + d,
        };
    }

    /// One monitoring tick. `current` is the engine serving new requests,
    /// `pending` the size of an engine still spawning.
    pub fn tick(&mut self, now: f64, current: u32, pending: Option<u32>) -> TickRecord {
        let rps = self.monitor.measured_rps(now);
        let need = required_engine(rps, &self.profiles);
        if need.tp == current && pending.is_none() {
            let d = self.profile(current).map_or(0.0, |p| p.spawn_time);
            self.grace.renew(now, d);
        }
        let grace_active = self.grace.active(now);
        let heading = pending.unwrap_or(current);
        let decision = if need.tp > heading {
            ScaleDecision::SpawnLarger(need.tp)
        } else if need.tp < heading && pending.is_none() && !grace_active {
            ScaleDecision::SpawnSmaller(need.tp)
        } else {
            ScaleDecision::None
        };
        TickRecord {
            time: now,
            rps,
            required_tp: need.tp,
            over_capacity: need.over_capacity,
            grace_active,
            decision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EngineState {
    /// Provisioning; serves nothing until `ready_at`.
    Spawning {
        ready_at: f64,
    },
    /// Sole engine receiving new requests.
    Active,
    /// Receiving new requests while the previous engine drains.
    TransitionServing,
    /// Finishing its scheduled work; admits nothing new.
    Draining,
    Retired,
}

impl EngineState {
    pub fn name(&self) -> &'static str {
        match self {
            EngineState::Spawning { .. } => "spawning",
            EngineState::Active => "active",
            EngineState::TransitionServing => "transition_serving",
            EngineState::Draining => "draining",
            EngineState::Retired => "retired",
        }
    }

    pub fn receives_new(&self) -> bool {
        matches!(self, EngineState::Active | EngineState::TransitionServing)
    }

    /// Draws power without serving new requests: the shadow share.
    pub fn is_shadow(&self) -> bool {
        matches!(self, EngineState::Spawning { .. } | EngineState::Draining)
    }
}

/// One row of the engine timeline export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineRow {
    pub time: f64,
    pub engine: usize,
    pub tp: u32,
    pub state: String,
}
