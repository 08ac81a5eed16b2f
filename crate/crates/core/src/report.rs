//! Latency/energy metrics, run comparison and file export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::SloConfig;
use crate::sim::{QueryRecord, RunResult, RunTotals};

/// Bumped whenever a key of [`SummaryDoc`] changes meaning or disappears.
pub const SCHEMA_VERSION: u32 = 1;

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSummary {
    pub trace_fingerprint: String,
    pub slo: SloConfig,
    pub queries: u64,
    pub served: u64,
    pub rejected: u64,
    /// Nearest-rank 99th percentile, seconds.
    pub e2e_p99: f64,
    pub e2e_mean: f64,
    /// Mean gap between consecutive tokens over all served queries.
    pub tbt_mean: f64,
    pub ttft_mean: f64,
    pub queue_mean: f64,
    pub energy_total: f64,
    pub shadow_energy: f64,
    pub tokens_total: u64,
    pub tpj: f64,
    /// Served, non-lost queries whose E2E exceeded the SLO.
    pub e2e_violations: u64,
    pub lost_count: u64,
    pub demoted_count: u64,
    pub slo_compliant: bool,
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the
/// samples at or below it.
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of no samples".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "percentile {p} outside [0, 100]"
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Ok(v[rank - 1])
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0u64), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn aggregate(run: &RunResult) -> Result<MetricsSummary> {
    // sort so that the result does not depend on record order
    let mut served: Vec<&QueryRecord> = run
        .queries
        .iter()
        .filter(|q| q.completed_at.is_some())
        .collect();
    if served.is_empty() {
        return Err(Error::InvalidArgument("run served no queries".into()));
    }
    served.sort_by_key(|q| q.id);

    let e2e: Vec<f64> = served
        .iter()
        .map(|q| q.completed_at.unwrap() - q.arrival)
        .collect();
    let e2e_p99 = percentile_nearest_rank(&e2e, 99.0)?;
    let (gap_sum, gaps) = served.iter().fold((0.0, 0u64), |(s, n), q| {
        (s + q.tbt_sum, n + q.tbt_gaps as u64)
    });
    let tbt_mean = if gaps == 0 {
        0.0
    } else {
        gap_sum / gaps as f64
    };
    let ttft_mean = mean(
        served
            .iter()
            .filter_map(|q| q.first_token_at.map(|f| f - q.arrival)),
    );
    let queue_mean = mean(
        served
            .iter()
            .filter_map(|q| q.scheduled_at.map(|s| s - q.arrival)),
    );
    let tokens_total: u64 = served.iter().map(|q| q.tokens as u64).sum();
    let energy_total = run.totals.energy_j;
    let tpj = if energy_total > 0.0 {
        tokens_total as f64 / energy_total
    } else {
        0.0
    };
    let e2e_violations = served
        .iter()
        .zip(&e2e)
        .filter(|(q, &e)| !q.lost && e > run.slo.e2e_slo)
        .count() as u64;
    Ok(MetricsSummary {
        trace_fingerprint: run.trace_fingerprint.clone(),
        slo: run.slo,
        queries: run.queries.len() as u64,
        served: served.len() as u64,
        rejected: run.queries.iter().filter(|q| q.rejected).count() as u64,
        e2e_p99,
        e2e_mean: mean(e2e.iter().copied()),
        tbt_mean,
        ttft_mean,
        queue_mean,
        energy_total,
        shadow_energy: run.totals.shadow_energy_j,
        tokens_total,
        tpj,
        e2e_violations,
        lost_count: served.iter().filter(|q| q.lost).count() as u64,
        demoted_count: served.iter().filter(|q| q.demoted).count() as u64,
        slo_compliant: e2e_p99 <= run.slo.e2e_slo && tbt_mean <= run.slo.tbt_slo,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// `(1 - candidate / baseline) * 100`.
    pub energy_reduction_pct: f64,
    pub tpj_ratio: f64,
    pub e2e_p99_delta: f64,
    pub tbt_delta: f64,
    pub slo_compliant: bool,
}

pub fn compare(baseline: &MetricsSummary, candidate: &MetricsSummary) -> Result<ComparisonReport> {
    if baseline.trace_fingerprint != candidate.trace_fingerprint {
        return Err(Error::TraceMismatch(
            baseline.trace_fingerprint.clone(),
            candidate.trace_fingerprint.clone(),
        ));
    }
    if !(baseline.energy_total > 0.0 && baseline.tpj > 0.0) {
        return Err(Error::InvalidArgument("baseline consumed no energy".into()));
    }
    Ok(ComparisonReport {
        energy_reduction_pct: (1.0 - candidate.energy_total / baseline.energy_total) * 100.0,
        tpj_ratio: candidate.tpj / baseline.tpj,
        e2e_p99_delta: candidate.e2e_p99 - baseline.e2e_p99,
        tbt_delta: candidate.tbt_mean - baseline.tbt_mean,
        slo_compliant: candidate.slo_compliant,
    })
}

/// The versioned document written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryDoc {
    pub schema_version: u32,
    pub seed: u64,
    pub metrics: MetricsSummary,
    pub totals: RunTotals,
}

impl SummaryDoc {
    pub fn new(run: &RunResult, metrics: MetricsSummary) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: run.seed,
            metrics,
            totals: run.totals.clone(),
        }
    }
}

pub fn load_summary(path: &Path) -> Result<SummaryDoc> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: SummaryDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        msg: e.to_string(),
    })?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::InvalidArgument(format!(
            "{}: schema version {} (expected {SCHEMA_VERSION})",
            path.display(),
            doc.schema_version
        )));
    }
    Ok(doc)
}

/// One second of the run, laid out as the five panels of a runtime plot:
/// load, engine, clock, power and tail latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub time: f64,
    // load
    pub rps: f64,
    // engine
    pub serving_tp: u32,
    pub engines_alive: u32,
    pub shadow: bool,
    // clock
    pub effective_mhz: u32,
    // power
    pub watts: f64,
    pub shadow_watts: f64,
    // latency, over queries finishing in the bin
    pub e2e_p99: Option<f64>,
}

/// Bins the run into `bin`-second rows on a shared time axis.
pub fn timeline(run: &RunResult, bin: f64) -> Result<Vec<TimelineRow>> {
    if !(bin > 0.0 && bin.is_finite()) {
        return Err(Error::InvalidArgument(format!("bin width {bin}")));
    }
    let end = run.totals.end_time.max(0.0);
    let n = ((end / bin).ceil() as usize).max(1);
    let mut arrivals = vec![0u64; n];
    let mut finished: Vec<Vec<f64>> = vec![Vec::new(); n];
    let slot = |t: f64| ((t / bin).floor() as usize).min(n - 1);
    for q in &run.queries {
        arrivals[slot(q.arrival)] += 1;
        if let Some(c) = q.completed_at {
            finished[slot(c)].push(c - q.arrival);
        }
    }
    let mut joules = vec![0.0; n];
    let mut shadow_joules = vec![0.0; n];
    for s in &run.segments {
        let mut i = slot(s.start);
        while i < n {
            let (lo, hi) = (i as f64 * bin, (i + 1) as f64 * bin);
            let overlap = s.end.min(hi) - s.start.max(lo);
            if overlap > 0.0 {
                joules[i] += s.watts * overlap;
                if s.shadow {
                    shadow_joules[i] += s.watts * overlap;
                }
            }
            if s.end <= hi {
                break;
            }
            i += 1;
        }
    }

    let mut rows = Vec::with_capacity(n);
    let mut states: BTreeMap<usize, (u32, &str)> = BTreeMap::new();
    let mut clocks: BTreeMap<usize, u32> = BTreeMap::new();
    let (mut ei, mut fi) = (0, 0);
    for i in 0..n {
        let t = i as f64 * bin;
        while ei < run.engines.len() && run.engines[ei].time <= t {
            let r = &run.engines[ei];
            states.insert(r.engine, (r.tp, r.state.as_str()));
            ei += 1;
        }
        while fi < run.frequency.len() && run.frequency[fi].time <= t {
            let r = &run.frequency[fi];
            clocks.insert(r.engine, r.effective_mhz);
            fi += 1;
        }
        let serving = states
            .iter()
            .find(|(_, (_, s))| matches!(*s, "active" | "transition_serving"));
        let alive = states.values().filter(|(_, s)| *s != "retired").count() as u32;
        let shadow = states
            .values()
            .any(|(_, s)| matches!(*s, "spawning" | "draining" | "transition_serving"));
        let (serving_tp, effective_mhz) = match serving {
            Some((id, (tp, _))) => (*tp, clocks.get(id).copied().unwrap_or(run.max_mhz)),
            None => (0, 0),
        };
        rows.push(TimelineRow {
            time: t,
            rps: arrivals[i] as f64 / bin,
            serving_tp,
            engines_alive: alive,
            shadow,
            effective_mhz,
            watts: joules[i] / bin,
            shadow_watts: shadow_joules[i] / bin,
            e2e_p99: if finished[i].is_empty() {
                None
            } else {
                Some(percentile_nearest_rank(&finished[i], 99.0)?)
            },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRow {
    pub time: f64,
    pub rps: f64,
    pub required_tp: u32,
    pub over_capacity: bool,
    pub grace_active: bool,
    pub decision: String,
}

fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`export`].
pub fn read_table<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// Writes the summary document and all flat tables into `dir`, returning
/// the paths written.
pub fn export(run: &RunResult, summary: &MetricsSummary, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();

    let doc = SummaryDoc::new(run, summary.clone());
    let path = dir.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::InvalidArgument(format!("summary not serializable: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    out.push(path);

    let mut table = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        let p = dir.join(name);
        f(&p)?;
        out.push(p);
        Ok(())
    };
    table("queries.csv", &|p| write_table(p, &run.queries))?;
    table("iterations.csv", &|p| write_table(p, &run.iterations))?;
    table("power.csv", &|p| write_table(p, &run.segments))?;
    table("frequency.csv", &|p| write_table(p, &run.frequency))?;
    table("engines.csv", &|p| write_table(p, &run.engines))?;
    table("audit.csv", &|p| write_table(p, &run.audit))?;
    let ticks: Vec<TickRow> = run
        .ticks
        .iter()
        .map(|t| TickRow {
            time: t.time,
            rps: t.rps,
            required_tp: t.required_tp,
            over_capacity: t.over_capacity,
            grace_active: t.grace_active,
            decision: t.decision.to_string(),
        })
        .collect();
    table("ticks.csv", &|p| write_table(p, &ticks))?;
    let tl = timeline(run, 1.0)?;
    table("timeline.csv", &|p| write_table(p, &tl))?;
    Ok(out)
}
