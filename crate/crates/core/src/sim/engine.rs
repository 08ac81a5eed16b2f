//! Per-engine simulation state.

use crate::autoscaler::EngineState;
use crate::perfmodel::EngineProfile;
use crate::scheduler::Scheduler;
use crate::throttle::FrequencyActuator;

use super::energy::PowerSegment;

/// A query decoding on an engine.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Running {
    /// Index of the query in the trace.
    pub idx: usize,
    pub id: u64,
    pub prompt_len: u32,
    /// Tokens the query will actually generate.
    pub target_len: u32,
    pub generated: u32,
}

/// Projected completion times anchored at one iteration start.
#[derive(Debug, Clone)]
pub(crate) struct Anchor {
    pub t0: f64,
    pub k0: u64,
    pub cumulative: Vec<f64>,
}

#[derive(Debug)]
pub(crate) struct Engine {
    pub id: usize,
    pub profile: EngineProfile,
    pub state: EngineState,
    pub sched: Scheduler,
    pub actuator: FrequencyActuator,
    pub running: Vec<Running>,
    /// An iteration is in flight.
    pub busy: bool,
    /// A wake-up boundary is queued.
    pub wake_pending: bool,
    /// Arrivals since the queue was last drained.
    pub new_arrivals: bool,
    /// Prompts admitted since the last iteration started.
    pub pending_prompts: Vec<u32>,
    pub anchor: Option<Anchor>,
    seg: Option<(f64, f64, bool)>,
    pub segments: Vec<PowerSegment>,
}

impl Engine {
    pub fn new(
        id: usize,
        profile: EngineProfile,
        state: EngineState,
        sched: Scheduler,
        actuator: FrequencyActuator,
    ) -> Self {
        Self {
            id,
            profile,
            state,
            sched,
            actuator,
            running: Vec::new(),
            busy: false,
            wake_pending: false,
            new_arrivals: false,
            pending_prompts: Vec::new(),
            anchor: None,
            seg: None,
            segments: Vec::new(),
        }
    }

    pub fn tp(&self) -> u32 {
        self.profile.tp
    }

    /// Starts drawing `watts` at `now`, closing the previous segment.
    pub fn set_power(&mut self, now: f64, watts: f64) {
        self.close_power(now);
        self.seg = Some((now, watts, self.state.is_shadow()));
    }

    /// Re-opens the current draw at `now`, e.g. after a state change that
    /// moves it in or out of the shadow share.
    pub fn split_power(&mut self, now: f64) {
        if let Some((_, watts, _)) = self.seg {
            self.set_power(now, watts);
        }
    }

    pub fn close_power(&mut self, now: f64) {
        if let Some((start, watts, shadow)) = self.seg.take() {
            if now > start {
                self.segments.push(PowerSegment {
                    engine: self.id,
                    tp: self.profile.tp,
                    start,
                    end: now,
                    watts,
                    shadow,
                });
            }
        }
    }

    pub fn kv_blocks(&self, tokens_per_block: u32) -> u32 {
        self.running
            .iter()
            .map(|r| (r.prompt_len + r.generated).div_ceil(tokens_per_block))
            .sum()
    }
}
