//! Discrete-event simulation of one serving deployment.
//!
//! Engines decode iteration by iteration. Controllers act only at iteration
//! boundaries: queued queries are admitted, the throttle picks a clock, and
//! the next iteration is timed by the ground-truth model at the clock in
//! effect when it starts. An idle engine is woken by a boundary event at
//! the arrival time.

mod energy;
mod engine;
mod event;

use serde::{Deserialize, Serialize};

use crate::autoscaler::{Autoscaler, EngineRow, EngineState, ScaleDecision, TickRecord};
use crate::error::{Error, Result};
use crate::perfmodel::{
    engine_idle_power, engine_power, validate_profiles, EngineProfile, FrequencyDomain, ModelSet,
};
use crate::scheduler::{
    compute_plan, AdmissionConfig, AdmissionDecision, AuditRow, Scheduler, SloConfig,
};
use crate::throttle::{min_slo_frequency, FrequencyActuator, FrequencyRow, ThrottleState};
use crate::trace::{fingerprint, Query};

pub use energy::{integrate_energy, EnergyTotals, PowerSegment};
pub use event::{Event, EventKind, EventQueue};

use engine::{Anchor, Engine, Running};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefillConfig {
    pub enabled: bool,
    /// Stall for a prompt of `reference_prompt` tokens at maximum clock.
    pub base_latency: f64,
    pub reference_prompt: u32,
}

impl Default for PrefillConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            base_latency: 0.175,
            reference_prompt: 4096,
        }
    }
}

impl PrefillConfig {
    pub fn stall(&self, prompt_len: u32, freq_mhz: f64, max_mhz: f64) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        self.base_latency
            * (prompt_len as f64 / self.reference_prompt as f64)
            * (max_mhz / freq_mhz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub tbt_slo: f64,
    /// p99 E2E target; defaults to the fixed engine's profile, or the
    /// largest profile when autoscaling.
    pub e2e_slo: Option<f64>,
    pub frequency: FrequencyDomain,
    pub tokens_per_block: u32,
    pub prefill: PrefillConfig,
    pub switch_latency: f64,
    /// Run the frequency throttle.
    pub throttle: bool,
    /// Fraction of the E2E SLO the throttle keeps in reserve for stalls it
    /// cannot project (prefill, clock switches).
    pub throttle_headroom: f64,
    /// Admit only when TBT and E2E checks pass; KV is always checked.
    pub slo_admission: bool,
    pub autoscaling: bool,
    /// Forces maximum clock, KV-only admission and a fixed engine.
    pub baseline_mode: bool,
    /// Throttle only on admissions, not on completions.
    pub paper_strict_throttle: bool,
    pub monitor_window: f64,
    /// Starting engine; smallest profile when autoscaling, largest otherwise.
    pub initial_tp: Option<u32>,
    pub max_tokens: u32,
    /// Track projected against simulated iteration times.
    pub audit_drift: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tbt_slo: 0.2,
            e2e_slo: None,
            frequency: FrequencyDomain::default(),
            tokens_per_block: crate::projection::DEFAULT_TOKENS_PER_BLOCK,
            prefill: PrefillConfig::default(),
            switch_latency: 0.2,
            throttle: true,
            throttle_headroom: 0.05,
            slo_admission: true,
            autoscaling: true,
            baseline_mode: false,
            paper_strict_throttle: false,
            monitor_window: 10.0,
            initial_tp: None,
            max_tokens: 4096,
            audit_drift: true,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.frequency.validate()?;
        let ok = self.tbt_slo > 0.0
            && self.e2e_slo.is_none_or(|s| s > 0.0)
            && self.tokens_per_block >= 1
            && self.switch_latency >= 0.0
            && (0.0..1.0).contains(&self.throttle_headroom)
            && self.prefill.base_latency >= 0.0
            && self.prefill.reference_prompt >= 1
            && self.monitor_window > 0.0
            && self.max_tokens >= 2;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid simulation config {self:?}"
            )));
        }
        Ok(())
    }

    pub fn throttle_on(&self) -> bool {
        self.throttle && !self.baseline_mode
    }

    pub fn slo_admission_on(&self) -> bool {
        self.slo_admission && !self.baseline_mode
    }

    pub fn autoscaling_on(&self) -> bool {
        self.autoscaling && !self.baseline_mode
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: u64,
    pub arrival: f64,
    pub prompt_len: u32,
    pub true_gen_len: u32,
    pub predicted_gen_len: u32,
    /// Size of the engine that served the query; 0 if never scheduled.
    pub engine_tp: u32,
    pub scheduled_at: Option<f64>,
    pub first_token_at: Option<f64>,
    pub completed_at: Option<f64>,
    /// Scheduled knowing it would miss its deadline.
    pub lost: bool,
    /// Scheduled in time, later found unable to meet its deadline.
    pub demoted: bool,
    /// Could not fit on an empty engine.
    pub rejected: bool,
    pub tokens: u32,
    /// Sum and count of gaps between consecutive tokens.
    pub tbt_sum: f64,
    pub tbt_gaps: u32,
    pub overruns: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub start: f64,
    pub end: f64,
    pub engine: usize,
    pub tp: u32,
    pub batch: u32,
    pub kv_blocks: u32,
    pub effective_mhz: u32,
    pub watts: f64,
    pub prefill_stall: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub energy_j: f64,
    pub shadow_energy_j: f64,
    pub tokens: u64,
    pub iterations: u64,
    pub frequency_switches: u64,
    pub throttle_calls: u64,
    /// Throttle calls where even the maximum clock missed the SLOs.
    pub throttle_failures: u64,
    pub overruns: u64,
    pub rejected: u64,
    pub demoted: u64,
    /// Iterations whose actual KV use exceeded the engine capacity.
    pub kv_overflow_iterations: u64,
    pub max_drift_s: f64,
    pub drift_samples: u64,
    pub end_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub trace_fingerprint: String,
    pub slo: SloConfig,
    pub max_mhz: u32,
    pub queries: Vec<QueryRecord>,
    pub iterations: Vec<IterationRecord>,
    pub segments: Vec<PowerSegment>,
    pub frequency: Vec<FrequencyRow>,
    pub engines: Vec<EngineRow>,
    pub ticks: Vec<TickRecord>,
    pub audit: Vec<AuditRow>,
    pub totals: RunTotals,
}

/// Runs the baseline: maximum clock, KV-only admission, fixed engine.
pub fn run_baseline(
    cfg: &SimConfig,
    trace: &[Query],
    models: &ModelSet,
    profiles: &[EngineProfile],
) -> Result<RunResult> {
    let cfg = SimConfig {
        baseline_mode: true,
        ..cfg.clone()
    };
    run(&cfg, trace, models, profiles)
}

pub fn run(
    cfg: &SimConfig,
    trace: &[Query],
    models: &ModelSet,
    profiles: &[EngineProfile],
) -> Result<RunResult> {
    let mut sim = Sim::new(cfg, trace, models, profiles)?;
    while let Some(ev) = sim.events.pop() {
        sim.now = ev.time;
        sim.handle(ev.kind).map_err(|e| Error::AtTime {
            time: ev.time,
            source: Box::new(e),
        })?;
    }
    Ok(sim.finish())
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    trace: &'a [Query],
    models: &'a ModelSet,
    slo: SloConfig,
    autoscaler: Option<Autoscaler>,
    profiles: Vec<EngineProfile>,
    engines: Vec<Engine>,
    events: EventQueue,
    now: f64,
    last_arrival: f64,
    records: Vec<QueryRecord>,
    last_token: Vec<f64>,
    iterations: Vec<IterationRecord>,
    frequency: Vec<FrequencyRow>,
    engine_rows: Vec<EngineRow>,
    ticks: Vec<TickRecord>,
    audit: Vec<AuditRow>,
    totals: RunTotals,
}

impl<'a> Sim<'a> {
    fn new(
        cfg: &'a SimConfig,
        trace: &'a [Query],
        models: &'a ModelSet,
        profiles: &[EngineProfile],
    ) -> Result<Self> {
        cfg.validate()?;
        if trace.is_empty() {
            return Err(Error::InvalidArgument("empty trace".into()));
        }
        if trace
            .windows(2)
            .any(|w| w[1].arrival_time < w[0].arrival_time)
        {
            return Err(Error::InvalidArgument("trace not sorted by arrival".into()));
        }
        let mut ids: Vec<u64> = trace.iter().map(|q| q.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!(
                "duplicate query id {}",
                w[0]
            )));
        }
        if let Some(q) = trace
            .iter()
            .find(|q| q.prompt_len == 0 || q.predicted_gen_len == 0)
        {
            return Err(Error::InvalidArgument(format!(
                "query {} has zero length fields",
                q.id
            )));
        }
        let profiles = validate_profiles(profiles)?;
        let autoscaling = cfg.autoscaling_on();
        let initial = match cfg.initial_tp {
            Some(tp) => *profiles
                .iter()
                .find(|p| p.tp == tp)
                .ok_or_else(|| Error::InvalidArgument(format!("no profile for initial tp {tp}")))?,
            None if autoscaling => profiles[0],
            None => profiles[profiles.len() - 1],
        };
        let e2e = cfg.e2e_slo.unwrap_or(if autoscaling {
            profiles[profiles.len() - 1].e2e_slo
        } else {
            initial.e2e_slo
        });
        let slo = SloConfig::new(cfg.tbt_slo, e2e)?;
        let autoscaler = if autoscaling {
            Some(Autoscaler::new(&profiles, cfg.monitor_window)?)
        } else {
            None
        };
        let records = trace
            .iter()
            .map(|q| QueryRecord {
                id: q.id,
                arrival: q.arrival_time,
                prompt_len: q.prompt_len,
                true_gen_len: q.true_gen_len,
                predicted_gen_len: q.predicted_gen_len,
                engine_tp: 0,
                scheduled_at: None,
                first_token_at: None,
                completed_at: None,
                lost: false,
                demoted: false,
                rejected: false,
                tokens: 0,
                tbt_sum: 0.0,
                tbt_gaps: 0,
                overruns: 0,
            })
            .collect();
        let mut sim = Sim {
            cfg,
            trace,
            models,
            slo,
            autoscaler,
            profiles,
            engines: Vec::new(),
            events: EventQueue::default(),
            now: 0.0,
            last_arrival: trace[trace.len() - 1].arrival_time,
            records,
            last_token: vec![0.0; trace.len()],
            iterations: Vec::new(),
            frequency: Vec::new(),
            engine_rows: Vec::new(),
            ticks: Vec::new(),
            audit: Vec::new(),
            totals: RunTotals::default(),
        };
        let first = sim.add_engine(initial, EngineState::Active)?;
        let idle = engine_idle_power(sim.models.power.as_ref(), initial.tp);
        sim.engines[first].set_power(0.0, idle);
        for (i, q) in trace.iter().enumerate() {
            sim.events.push(q.arrival_time, EventKind::Arrival(i));
        }
        if let Some(a) = &sim.autoscaler {
            if a.window() <= sim.last_arrival {
                sim.events.push(a.window(), EventKind::AutoscaleTick);
            }
        }
        Ok(sim)
    }

    fn add_engine(&mut self, profile: EngineProfile, state: EngineState) -> Result<usize> {
        let id = self.engines.len();
        let sched = Scheduler::new(
            AdmissionConfig {
                tp: profile.tp,
                kv_capacity: profile.kv_capacity,
                max_freq_mhz: self.cfg.frequency.max_mhz as f64,
                slo: self.slo,
                slo_checks: self.cfg.slo_admission_on(),
            },
            self.cfg.tokens_per_block,
        )?;
        let actuator = FrequencyActuator::new(self.cfg.frequency.max_mhz, self.cfg.switch_latency)?;
        self.engines
            .push(Engine::new(id, profile, state, sched, actuator));
        self.engine_row(id);
        Ok(id)
    }

    fn engine_row(&mut self, id: usize) {
        let e = &self.engines[id];
        self.engine_rows.push(EngineRow {
            time: self.now,
            engine: id,
            tp: e.tp(),
            state: e.state.name().to_string(),
        });
    }

    fn set_state(&mut self, id: usize, state: EngineState) {
        let now = self.now;
        let e = &mut self.engines[id];
        e.state = state;
        if state == EngineState::Retired {
            e.close_power(now);
        } else {
            e.split_power(now);
        }
        self.engine_row(id);
    }

    fn serving(&self) -> usize {
        self.engines
            .iter()
            .position(|e| e.state.receives_new())
            .expect("one engine always receives new requests")
    }

    fn handle(&mut self, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::Arrival(i) => self.on_arrival(i),
            EventKind::IterationComplete { engine, kick } => self.on_boundary(engine, kick),
            EventKind::FreqSwitchDone { engine, generation } => {
                let e = &mut self.engines[engine];
                if e.actuator.complete(generation) {
                    self.frequency.push(FrequencyRow {
                        time: self.now,
                        engine,
                        target_mhz: e.actuator.target_mhz(),
                        effective_mhz: e.actuator.effective_mhz(),
                        bypassed: false,
                    });
                }
                Ok(())
            }
            EventKind::EngineReady { engine } => self.on_ready(engine),
            EventKind::AutoscaleTick => self.on_tick(),
        }
    }

    fn on_arrival(&mut self, i: usize) -> Result<()> {
        if let Some(a) = &mut self.autoscaler {
            a.record_arrival(self.now);
        }
        let id = self.serving();
        let e = &mut self.engines[id];
        e.sched.enqueue(self.trace[i]);
        e.new_arrivals = true;
        self.wake(id);
        Ok(())
    }

    fn wake(&mut self, id: usize) {
        let e = &mut self.engines[id];
        if !e.busy && !e.wake_pending {
            e.wake_pending = true;
            self.events.push(
                self.now,
                EventKind::IterationComplete {
                    engine: id,
                    kick: true,
                },
            );
        }
    }

    fn on_boundary(&mut self, id: usize, kick: bool) -> Result<()> {
        let now = self.now;
        let cfg = self.cfg;
        let mut completed = Vec::new();
        let mut early = false;
        let mut overran = false;
        if kick {
            self.engines[id].wake_pending = false;
            if self.engines[id].busy {
                return Ok(());
            }
        } else {
            let e = &mut self.engines[id];
            e.busy = false;
            let k = e.sched.scoreboard().current_iter();
            for r in e.running.iter_mut() {
                r.generated += 1;
                let rec = &mut self.records[r.idx];
                if r.generated == 1 {
                    rec.first_token_at = Some(now);
                } else {
                    rec.tbt_sum += now - self.last_token[r.idx];
                    rec.tbt_gaps += 1;
                }
                self.last_token[r.idx] = now;
                rec.tokens = r.generated;
                self.totals.tokens += 1;
                if r.generated == r.target_len {
                    rec.completed_at = Some(now);
                    completed.push(r.id);
                    let end = e.sched.scoreboard().get(r.id).map_or(0, |s| s.end_iter());
                    early |= end != k + 1;
                }
            }
            e.running.retain(|r| r.generated < r.target_len);
            e.sched.advance(&completed)?;
            for qid in e.sched.scoreboard().overdue() {
                let o = e.sched.on_overrun(qid, cfg.max_tokens)?;
                if let Some(r) = e.running.iter().find(|r| r.id == qid) {
                    self.records[r.idx].overruns += 1;
                }
                self.totals.overruns += 1;
                overran |= !o.at_limit;
            }
            if let Some(a) = &e.anchor {
                let d = (e.sched.scoreboard().current_iter() - a.k0) as usize;
                if d >= 1 && d <= a.cumulative.len() {
                    let drift = (now - (a.t0 + a.cumulative[d - 1])).abs();
                    self.totals.max_drift_s = self.totals.max_drift_s.max(drift);
                    self.totals.drift_samples += 1;
                }
            }
        }

        let admitted = self.admit(id, !completed.is_empty())?;
        let retarget = self.throttle(id, admitted, !completed.is_empty() || overran)?;
        let changed = admitted || overran || early || retarget;
        self.start_iteration(id, changed)
    }

    /// Drains the queue after completions or arrivals. Returns whether
    /// anything was scheduled.
    fn admit(&mut self, id: usize, freed: bool) -> Result<bool> {
        let now = self.now;
        let e = &mut self.engines[id];
        if !e.state.receives_new() || !(freed || e.new_arrivals) || e.sched.queue().is_empty() {
            return Ok(false);
        }
        e.new_arrivals = false;
        let report = e.sched.drain_queue(now, self.models.predictor.as_ref())?;
        let tp = e.tp();
        for (q, d) in &report.admitted {
            let idx = self.index_of(q.id);
            let rec = &mut self.records[idx];
            rec.scheduled_at = Some(now);
            rec.engine_tp = tp;
            rec.lost = *d == AdmissionDecision::ScheduledLost;
            let target_len = q
                .true_gen_len
                .min(self.cfg.max_tokens.saturating_sub(q.prompt_len))
                .max(1);
            let e = &mut self.engines[id];
            e.running.push(Running {
                idx,
                id: q.id,
                prompt_len: q.prompt_len,
                target_len,
                generated: 0,
            });
            e.pending_prompts.push(q.prompt_len);
        }
        for &qid in &report.demoted {
            let idx = self.index_of(qid);
            self.records[idx].demoted = true;
            self.totals.demoted += 1;
        }
        for q in &report.rejected {
            let idx = self.index_of(q.id);
            self.records[idx].rejected = true;
            self.totals.rejected += 1;
            log::warn!(
                "query {} rejected: does not fit an empty TP{tp} engine",
                q.id
            );
        }
        self.audit.extend(report.audit);
        Ok(!report.admitted.is_empty())
    }

    fn index_of(&self, id: u64) -> usize {
        // ids are usually positions; fall back to a search otherwise
        let guess = id as usize;
        if guess < self.trace.len() && self.trace[guess].id == id {
            return guess;
        }
        self.trace
            .iter()
            .position(|q| q.id == id)
            .expect("query from this trace")
    }

    /// Returns whether a new clock target was requested.
    fn throttle(&mut self, id: usize, admitted: bool, completed: bool) -> Result<bool> {
        let cfg = self.cfg;
        let now = self.now;
        let e = &mut self.engines[id];
        let triggered = admitted || (completed && !cfg.paper_strict_throttle);
        if !cfg.throttle_on() || !triggered || e.sched.scoreboard().is_empty() {
            return Ok(false);
        }
        let proj = e.sched.scoreboard().project();
        let st = ThrottleState {
            proj: &proj,
            sb: e.sched.scoreboard(),
            deadlines: e.sched.deadlines(),
            tp: e.tp(),
            model: self.models.predictor.as_ref(),
            slo: &self.slo,
            now,
            headroom: cfg.throttle_headroom * self.slo.e2e_slo,
        };
        self.totals.throttle_calls += 1;
        let (target, bypassed) = match min_slo_frequency(&st, &cfg.frequency) {
            Ok(d) => (d.target_mhz, d.bypassed),
            Err(Error::NoCompliantFrequency) => {
                self.totals.throttle_failures += 1;
                (cfg.frequency.max_mhz, false)
            }
            Err(err) => return Err(err),
        };
        let before = e.actuator.target_mhz();
        if let Some(p) = e.actuator.request(target, now) {
            self.events.push(
                p.done_at,
                EventKind::FreqSwitchDone {
                    engine: id,
                    generation: p.generation,
                },
            );
        }
        let e = &self.engines[id];
        let changed = e.actuator.target_mhz() != before;
        self.frequency.push(FrequencyRow {
            time: now,
            engine: id,
            target_mhz: e.actuator.target_mhz(),
            effective_mhz: e.actuator.effective_mhz(),
            bypassed,
        });
        Ok(changed)
    }

    fn start_iteration(&mut self, id: usize, changed: bool) -> Result<()> {
        let now = self.now;
        let cfg = self.cfg;
        let models = self.models;
        let e = &mut self.engines[id];
        if e.running.is_empty() {
            e.anchor = None;
            let idle = engine_idle_power(models.power.as_ref(), e.tp());
            e.set_power(now, idle);
            if e.state == EngineState::Draining && e.sched.is_idle() {
                self.retire(id);
            }
            return Ok(());
        }
        let f = e.actuator.effective_mhz() as f64;
        let fmax = cfg.frequency.max_mhz as f64;
        let batch = e.running.len() as u32;
        let kv = e.kv_blocks(cfg.tokens_per_block);
        let ips = models.engine.predict_ips(e.tp(), batch, kv, f);
        if !(ips > 0.0 && ips.is_finite()) {
            return Err(Error::ModelContract(format!(
                "engine model returned {ips} IPS at tp={} batch={batch} kv={kv} f={f}",
                e.tp()
            )));
        }
        let stall: f64 = e
            .pending_prompts
            .drain(..)
            .map(|p| cfg.prefill.stall(p, f, fmax))
            .sum();
        let end = now + stall + 1.0 / ips;
        let watts = engine_power(models.power.as_ref(), e.tp(), f, kv);
        e.set_power(now, watts);
        e.busy = true;
        if kv > e.profile.kv_capacity {
            self.totals.kv_overflow_iterations += 1;
        }
        let stale = e.anchor.as_ref().is_none_or(|_| changed);
        if cfg.audit_drift && stale {
            let proj = e.sched.scoreboard().project();
            e.anchor = if proj.is_empty() {
                None
            } else {
                let plan = compute_plan(&proj, e.tp(), f, models.predictor.as_ref())?;
                Some(Anchor {
                    t0: now + stall,
                    k0: e.sched.scoreboard().current_iter(),
                    cumulative: plan.cumulative().to_vec(),
                })
            };
        }
        self.iterations.push(IterationRecord {
            start: now,
            end,
            engine: id,
            tp: e.tp(),
            batch,
            kv_blocks: kv,
            effective_mhz: f as u32,
            watts,
            prefill_stall: stall,
        });
        self.totals.iterations += 1;
        self.events.push(
            end,
            EventKind::IterationComplete {
                engine: id,
                kick: false,
            },
        );
        Ok(())
    }

    fn retire(&mut self, id: usize) {
        self.set_state(id, EngineState::Retired);
        if let Some(next) = self
            .engines
            .iter()
            .position(|e| e.state == EngineState::TransitionServing)
        {
            if !self
                .engines
                .iter()
                .any(|e| e.state == EngineState::Draining)
            {
                self.set_state(next, EngineState::Active);
            }
        }
    }

    fn on_ready(&mut self, id: usize) -> Result<()> {
        if !matches!(self.engines[id].state, EngineState::Spawning { .. }) {
            // cancelled by a later spawn
            return Ok(());
        }
        let old = self.serving();
        self.set_state(id, EngineState::TransitionServing);
        self.set_state(old, EngineState::Draining);
        let queue = self.engines[old].sched.take_queue();
        let had_queue = !queue.is_empty();
        for q in queue {
            self.engines[id].sched.enqueue(q);
        }
        self.engines[id].new_arrivals = had_queue;
        let tp = self.engines[id].tp();
        if let Some(a) = &mut self.autoscaler {
            a.on_engine_ready(tp, self.now);
        }
        if had_queue {
            self.wake(id);
        }
        let o = &self.engines[old];
        if !o.busy && o.running.is_empty() {
            self.retire(old);
        }
        Ok(())
    }

    fn on_tick(&mut self) -> Result<()> {
        let now = self.now;
        let serving = self.serving();
        let current = self.engines[serving].tp();
        let pending = self
            .engines
            .iter()
            .find(|e| matches!(e.state, EngineState::Spawning { .. }))
            .map(|e| e.tp());
        let Some(a) = &mut self.autoscaler else {
            return Ok(());
        };
        let rec = a.tick(now, current, pending);
        let window = a.window();
        self.ticks.push(rec);
        match rec.decision {
            ScaleDecision::SpawnLarger(tp) | ScaleDecision::SpawnSmaller(tp) => self.spawn(tp)?,
            ScaleDecision::None => {}
        }
        if now + window <= self.last_arrival {
            self.events.push(now + window, EventKind::AutoscaleTick);
        }
        Ok(())
    }

    fn spawn(&mut self, tp: u32) -> Result<()> {
        let profile = *self
            .profiles
            .iter()
            .find(|p| p.tp == tp)
            .ok_or_else(|| Error::Consistency(format!("no profile for tp {tp}")))?;
        let serving = self.serving();
        if self.engines[serving].tp() == tp {
            return Ok(());
        }
        // one pending spawn at a time
        let pending: Vec<usize> = self
            .engines
            .iter()
            .filter(|e| matches!(e.state, EngineState::Spawning { .. }))
            .map(|e| e.id)
            .collect();
        for p in pending {
            self.set_state(p, EngineState::Retired);
        }
        let ready_at = self.now + profile.spawn_time;
        let id = self.add_engine(profile, EngineState::Spawning { ready_at })?;
        let idle = engine_idle_power(self.models.power.as_ref(), tp);
        self.engines[id].set_power(self.now, idle);
        self.events
            .push(ready_at, EventKind::EngineReady { engine: id });
        Ok(())
    }

    fn finish(mut self) -> RunResult {
        let end = self.now;
        let mut segments = Vec::new();
        for e in &mut self.engines {
            self.totals.frequency_switches += e.actuator.switches();
            e.close_power(end);
            segments.append(&mut e.segments);
        }
        segments.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.engine.cmp(&b.engine)));
        let energy = integrate_energy(&segments).expect("segments sorted");
        self.totals.energy_j = energy.total_j;
        self.totals.shadow_energy_j = energy.shadow_j;
        self.totals.end_time = end;
        RunResult {
            seed: self.cfg.seed,
            trace_fingerprint: fingerprint(self.trace),
            slo: self.slo,
            max_mhz: self.cfg.frequency.max_mhz,
            queries: self.records,
            iterations: self.iterations,
            segments,
            frequency: self.frequency,
            engines: self.engine_rows,
            ticks: self.ticks,
            audit: self.audit,
            totals: self.totals,
        }
    }
}
