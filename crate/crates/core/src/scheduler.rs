//! Admission control.
//!
//! A query is admitted only if, with the query virtually appended to the
//! scoreboard and the engine at maximum frequency, (1) the projected KV
//! blocks fit, (2) the average projected TBT meets the TBT SLO and (3) every
//! scheduled query still finishes before its deadline. A query whose own
//! deadline is already out of reach, but which harms nobody else, is
//! scheduled as *lost* and ignored by later E2E checks.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perfmodel::PerfModel;
use crate::projection::{ProjectionSet, Scoreboard, ScoreboardEntry};
use crate::trace::Query;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloConfig {
    /// Average time-between-tokens target, seconds.
    pub tbt_slo: f64,
    /// p99 end-to-end latency target, seconds.
    pub e2e_slo: f64,
}

impl SloConfig {
    pub fn new(tbt_slo: f64, e2e_slo: f64) -> Result<Self> {
        let s = Self { tbt_slo, e2e_slo };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tbt_slo > 0.0 && self.e2e_slo > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "SLOs must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn deadline(&self, arrival_time: f64) -> f64 {
        arrival_time + self.e2e_slo
    }
}

/// Throughput, TBT and cumulative time per projected iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputPlan {
    ips: Vec<f64>,
    tbt: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ThroughputPlan {
    pub fn from_ips(ips: Vec<f64>) -> Self {
        let tbt: Vec<f64> = ips.iter().map(|x| 1.0 / x).collect();
        let mut acc = 0.0;
        let cumulative = tbt
            .iter()
            .map(|t| {
                acc += t;
                acc
            })
            .collect();
        Self {
            ips,
            tbt,
            cumulative,
        }
    }

    pub fn len(&self) -> usize {
        self.ips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ips.is_empty()
    }

    pub fn ips(&self) -> &[f64] {
        &self.ips
    }

    pub fn tbt(&self) -> &[f64] {
        &self.tbt
    }

    /// `TR`: element `d - 1` is the time from now until offset `d` completes.
    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn mean_tbt(&self) -> f64 {
        if self.tbt.is_empty() {
            return 0.0;
        }
        self.tbt.iter().sum::<f64>() / self.tbt.len() as f64
    }
}

pub fn compute_plan(
    proj: &ProjectionSet,
    tp: u32,
    freq_mhz: f64,
    model: &dyn PerfModel,
) -> Result<ThroughputPlan> {
    if proj.is_empty() {
        return Err(Error::InvalidArgument(
            "throughput plan of an empty projection".into(),
        ));
    }
    let mut ips = Vec::with_capacity(proj.n());
    let mut last: Option<((u32, u32), f64)> = None;
    for (&b, &kv) in proj.batch().iter().zip(proj.kv()) {
        // consecutive offsets often share a state
        let v = match last {
            Some((key, v)) if key == (b, kv) => v,
            _ => {
                let v = model.predict_ips(tp, b, kv, freq_mhz);
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::ModelContract(format!(
                        "predict_ips(tp={tp}, batch={b}, kv={kv}, f={freq_mhz}) = {v}"
                    )));
                }
                last = Some(((b, kv), v));
                v
            }
        };
        ips.push(v);
    }
    Ok(ThroughputPlan::from_ips(ips))
}

pub fn check_kv(proj: &ProjectionSet, kv_capacity: u32) -> bool {
    proj.max_kv() <= kv_capacity
}

pub fn check_tbt(plan: &ThroughputPlan, slo: &SloConfig) -> bool {
    plan.mean_tbt() <= slo.tbt_slo
}

/// Eq. 4 evaluated for every non-lost entry.
#[derive(Debug, Clone, PartialEq)]
pub struct E2eOutcome {
    /// Smallest `deadline - (now + TR[l])`; infinite when nothing is checked.
    pub worst_slack: f64,
    /// Entries whose slack is not strictly positive.
    pub violators: Vec<u64>,
}

impl E2eOutcome {
    pub fn ok(&self) -> bool {
        self.violators.is_empty()
    }
}

pub fn e2e_outcome<'a>(
    plan: &ThroughputPlan,
    entries: impl Iterator<Item = &'a ScoreboardEntry>,
    k: u64,
    now: f64,
    deadlines: &BTreeMap<u64, f64>,
) -> Result<E2eOutcome> {
    let tr = plan.cumulative();
    let mut out = E2eOutcome {
        worst_slack: f64::INFINITY,
        violators: Vec::new(),
    };
    for e in entries.filter(|e| !e.lost) {
        let l = e.end_iter() as i64 - k as i64;
        if l < 1 || l as usize > tr.len() {
            return Err(Error::Consistency(format!(
                "query {} completes at offset {l}, outside 1..={}",
                e.query_id,
                tr.len()
            )));
        }
        let deadline = *deadlines
            .get(&e.query_id)
            .ok_or_else(|| Error::Consistency(format!("no deadline for query {}", e.query_id)))?;
        let slack = deadline - (now + tr[l as usize - 1]);
        out.worst_slack = out.worst_slack.min(slack);
        if !(slack > 0.0) {
            out.violators.push(e.query_id);
        }
    }
    Ok(out)
}

pub fn check_e2e(
    plan: &ThroughputPlan,
    sb: &Scoreboard,
    now: f64,
    deadlines: &BTreeMap<u64, f64>,
) -> Result<bool> {
    Ok(e2e_outcome(plan, sb.entries(), sb.current_iter(), now, deadlines)?.ok())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueueReason {
    KvCapacity,
    TbtViolation,
    E2eViolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdmissionDecision {
    Scheduled,
    ScheduledLost,
    Queued(QueueReason),
}

impl AdmissionDecision {
    pub fn is_scheduled(&self) -> bool {
        !matches!(self, AdmissionDecision::Queued(_))
    }
}

impl fmt::Display for AdmissionDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AdmissionDecision::Scheduled => "scheduled",
            AdmissionDecision::ScheduledLost => "scheduled_lost",
            AdmissionDecision::Queued(QueueReason::KvCapacity) => "queued_kv",
            AdmissionDecision::Queued(QueueReason::TbtViolation) => "queued_tbt",
            AdmissionDecision::Queued(QueueReason::E2eViolation) => "queued_e2e",
        };
        f.write_str(s)
    }
}

/// One admission attempt, for offline analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub time: f64,
    pub tp: u32,
    pub query_id: u64,
    pub decision: String,
    pub max_kv: u32,
    pub mean_tbt: f64,
    pub worst_slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissionConfig {
    pub tp: u32,
    pub kv_capacity: u32,
    pub max_freq_mhz: f64,
    pub slo: SloConfig,
    /// Off for the baseline: only the physical KV check applies.
    pub slo_checks: bool,
}

#[derive(Debug, Default)]
pub struct DrainReport {
    pub admitted: Vec<(Query, AdmissionDecision)>,
    /// Queries that cannot be admitted even on an otherwise empty engine.
    pub rejected: Vec<Query>,
    /// Scheduled queries found past saving and marked lost.
    pub demoted: Vec<u64>,
    pub audit: Vec<AuditRow>,
}

/// Scoreboard, deadlines and FIFO queue of one engine.
#[derive(Debug, Clone)]
pub struct Scheduler {
    cfg: AdmissionConfig,
    sb: Scoreboard,
    deadlines: BTreeMap<u64, f64>,
    queue: VecDeque<Query>,
    demoted: Vec<u64>,
}

impl Scheduler {
    pub fn new(cfg: AdmissionConfig, tokens_per_block: u32) -> Result<Self> {
        cfg.slo.validate()?;
        if cfg.kv_capacity == 0 || !(cfg.max_freq_mhz > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid admission config {cfg:?}"
            )));
        }
        Ok(Self {
            cfg,
            sb: Scoreboard::new(tokens_per_block)?,
            deadlines: BTreeMap::new(),
            queue: VecDeque::new(),
            demoted: Vec::new(),
        })
    }

    /// Queries demoted to lost since the last call.
    pub fn take_demoted(&mut self) -> Vec<u64> {
        std::mem::take(&mut self.demoted)
    }

    pub fn config(&self) -> &AdmissionConfig {
        &self.cfg
    }

    pub fn scoreboard(&self) -> &Scoreboard {
        &self.sb
    }

    pub fn deadlines(&self) -> &BTreeMap<u64, f64> {
        &self.deadlines
    }

    pub fn queue(&self) -> &VecDeque<Query> {
        &self.queue
    }

    pub fn is_idle(&self) -> bool {
        self.sb.is_empty() && self.queue.is_empty()
    }

    pub fn enqueue(&mut self, q: Query) {
        self.queue.push_back(q);
    }

    /// Empties the queue, e.g. to hand it to a replacement engine.
    pub fn take_queue(&mut self) -> VecDeque<Query> {
        std::mem::take(&mut self.queue)
    }

    /// Finishes one iteration on the scoreboard.
    pub fn advance(&mut self, completed: &[u64]) -> Result<()> {
        self.sb.advance(completed)?;
        for id in completed {
            self.deadlines.remove(id);
        }
        Ok(())
    }

    pub fn on_overrun(&mut self, id: u64, max_tokens: u32) -> Result<crate::projection::Overrun> {
        self.sb.on_overrun(id, max_tokens)
    }

    /// Attempts to schedule `q` now; commits on success, leaves every piece
    /// of state untouched otherwise.
    pub fn try_admit(
        &mut self,
        q: &Query,
        now: f64,
        model: &dyn PerfModel,
    ) -> Result<(AdmissionDecision, AuditRow)> {
        if self.sb.contains(q.id) {
            return Err(Error::DuplicateQuery(q.id));
        }
        let mut cand = self.sb.candidate(q.id, q.prompt_len, q.predicted_gen_len);
        let proj = self.sb.virtual_project(&cand)?;
        let mut row = AuditRow {
            time: now,
            tp: self.cfg.tp,
            query_id: q.id,
            decision: String::new(),
            max_kv: proj.max_kv(),
            mean_tbt: f64::NAN,
            worst_slack: f64::NAN,
        };
        let mut decision = self.evaluate(&cand, &proj, q, now, model, &mut row)?;
        if decision == AdmissionDecision::Queued(QueueReason::E2eViolation)
            && !self.demote_overdue(now, model)?.is_empty()
        {
            decision = self.evaluate(&cand, &proj, q, now, model, &mut row)?;
        }
        if decision.is_scheduled() {
            cand.lost = decision == AdmissionDecision::ScheduledLost;
            self.sb.insert(cand)?;
            self.deadlines
                .insert(q.id, self.cfg.slo.deadline(q.arrival_time));
        }
        row.decision = decision.to_string();
        Ok((decision, row))
    }

    /// Marks lost every scheduled query that misses its deadline even at
    /// maximum frequency without further admissions. Such a query would
    /// otherwise block the queue until it completes.
    pub fn demote_overdue(&mut self, now: f64, model: &dyn PerfModel) -> Result<Vec<u64>> {
        if self.sb.is_empty() {
            return Ok(Vec::new());
        }
        let proj = self.sb.project();
        let plan = compute_plan(&proj, self.cfg.tp, self.cfg.max_freq_mhz, model)?;
        let out = e2e_outcome(
            &plan,
            self.sb.entries(),
            self.sb.current_iter(),
            now,
            &self.deadlines,
        )?;
        for &id in &out.violators {
            self.sb.mark_lost(id)?;
        }
        self.demoted.extend_from_slice(&out.violators);
        if !out.violators.is_empty() {
            log::debug!("t={now:.3}: demoted {:?} to lost", out.violators);
        }
        Ok(out.violators)
    }

    fn evaluate(
        &self,
        cand: &ScoreboardEntry,
        proj: &ProjectionSet,
        q: &Query,
        now: f64,
        model: &dyn PerfModel,
        row: &mut AuditRow,
    ) -> Result<AdmissionDecision> {
        if !check_kv(proj, self.cfg.kv_capacity) {
            return Ok(AdmissionDecision::Queued(QueueReason::KvCapacity));
        }
        if !self.cfg.slo_checks {
            return Ok(AdmissionDecision::Scheduled);
        }
        let plan = compute_plan(proj, self.cfg.tp, self.cfg.max_freq_mhz, model)?;
        row.mean_tbt = plan.mean_tbt();
        if !check_tbt(&plan, &self.cfg.slo) {
            return Ok(AdmissionDecision::Queued(QueueReason::TbtViolation));
        }
        let mut deadlines = self.deadlines.clone();
        deadlines.insert(q.id, self.cfg.slo.deadline(q.arrival_time));
        let k = self.sb.current_iter();
        let outcome = e2e_outcome(
            &plan,
            self.sb.entries().chain(std::iter::once(cand)),
            k,
            now,
            &deadlines,
        )?;
        row.worst_slack = outcome.worst_slack;
        Ok(match outcome.violators.as_slice() {
            [] => AdmissionDecision::Scheduled,
            [only] if *only == q.id => AdmissionDecision::ScheduledLost,
            _ => AdmissionDecision::Queued(QueueReason::E2eViolation),
        })
    }

    /// Admits queue heads while they fit. A head refused by an empty engine
    /// can never fit and is rejected instead of blocking the queue.
    pub fn drain_queue(&mut self, now: f64, model: &dyn PerfModel) -> Result<DrainReport> {
        let mut report = DrainReport::default();
        while let Some(head) = self.queue.front() {
            let head = *head;
            let (decision, row) = self.try_admit(&head, now, model)?;
            report.audit.push(row);
            report.demoted.extend(self.take_demoted());
            if decision.is_scheduled() {
                self.queue.pop_front();
                report.admitted.push((head, decision));
            } else if self.sb.is_empty() {
                self.queue.pop_front();
                report.rejected.push(head);
            } else {
                break;
            }
        }
        Ok(report)
    }
}
