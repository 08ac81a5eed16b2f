//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if
//! any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ecoserve::autoscaler::ScaleDecision;
use ecoserve::perfmodel::{
    engine_idle_power, profile_preset, EngineProfile, FrequencyDomain, ModelSet, PerfModel,
};
use ecoserve::projection::{ProjectionSet, Scoreboard, ScoreboardEntry};
use ecoserve::scheduler::SloConfig;
use ecoserve::sim::{run, PrefillConfig, RunResult, SimConfig};
use ecoserve::throttle::{min_slo_frequency, ThrottleState};
use ecoserve::trace::{scale_trace, synthesize_trace, Query, RpsProfile, TraceSpec};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn llama13() -> Vec<EngineProfile> {
    profile_preset("llama2-13b").unwrap()
}

fn fixed(tp: u32) -> SimConfig {
    SimConfig {
        autoscaling: false,
        initial_tp: Some(tp),
        ..SimConfig::default()
    }
}

fn no_prefill() -> PrefillConfig {
    PrefillConfig {
        enabled: false,
        ..PrefillConfig::default()
    }
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ecoserve(args: &[&str]) -> Result<i32, String> {
    ecoserve_cli::run_to(
        std::iter::once("ecoserve").chain(args.iter().copied()),
        &mut std::io::sink(),
    )
    .map_err(|e| format!("{e:#}"))
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

// ---------------------------------------------------------------- 1

/// Allocates KV blocks one token at a time and records the per-iteration
/// batch and block totals from iteration `k` on.
fn brute_force_projection(entries: &[ScoreboardEntry], k: u64, n_tok: u32) -> (Vec<u32>, Vec<u32>) {
    let horizon = entries
        .iter()
        .map(|e| e.sched_iter + e.pred_gen as u64)
        .max()
        .unwrap_or(k)
        - k;
    let mut batch = vec![0u32; horizon as usize];
    let mut kv = vec![0u32; horizon as usize];
    for e in entries {
        let (mut tokens, mut blocks) = (0u64, 0u32);
        let push = |tokens: &mut u64, blocks: &mut u32| {
            *tokens += 1;
            if *tokens > *blocks as u64 * n_tok as u64 {
                *blocks += 1;
            }
        };
        for _ in 0..e.prompt_len {
            push(&mut tokens, &mut blocks);
        }
        for j in e.sched_iter..e.sched_iter + e.pred_gen as u64 {
            if j >= k {
                let d = (j - k) as usize;
                batch[d] += 1;
                kv[d] += blocks;
            }
            push(&mut tokens, &mut blocks);
        }
    }
    (batch, kv)
}

fn c1_projection_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let mut total_entries = 0;
    for _ in 0..1000 {
        let n_tok = *[16u32, 64, 128].choose(&mut rng).unwrap();
        let k = rng.random_range(0..20_000u64);
        let mut sb = Scoreboard::at_iteration(n_tok, k).unwrap();
        let count = rng.random_range(1..=512);
        let mut entries = Vec::with_capacity(count);
        for id in 0..count as u64 {
            let pred_gen = rng.random_range(1..=4096u32);
            // still running at k: s <= k < s + r
            let back = rng.random_range(0..pred_gen as u64).min(k);
            let e = ScoreboardEntry {
                query_id: id,
                sched_iter: k - back,
                prompt_len: rng.random_range(1..=4096),
                pred_gen,
                lost: rng.random_bool(0.05),
            };
            sb.insert(e).unwrap();
            entries.push(e);
        }
        total_entries += count;
        let proj = sb.project();
        let (batch, kv) = brute_force_projection(&entries, k, n_tok);
        if proj.batch() != batch.as_slice() || proj.kv() != kv.as_slice() {
            mismatches += 1;
        }
    }
    ensure!(
        mismatches == 0,
        "{mismatches} of 1000 scoreboards differ from the brute force"
    );
    Ok(format!(
        "1000 scoreboards ({total_entries} entries), 0 mismatches"
    ))
}

// ---------------------------------------------------------------- 2

fn c2_zero_drift() -> Outcome {
    let models = ModelSet::reference();
    let cfg = SimConfig {
        prefill: no_prefill(),
        switch_latency: 0.0,
        // clock changes only at admissions, so each admission's projection
        // holds until the next one
        paper_strict_throttle: true,
        ..fixed(2)
    };
    let trace = synthesize_trace(&TraceSpec {
        duration: 300.0,
        rps_profile: RpsProfile::constant(3.0),
        seed: 2,
        ..TraceSpec::default()
    })
    .unwrap();
    let r = run(&cfg, &trace, &models, &llama13()).unwrap();
    ensure!(r.totals.drift_samples > 0, "no drift samples");
    ensure!(
        r.totals.max_drift_s <= 1e-9,
        "simulator audit drift {}",
        r.totals.max_drift_s
    );

    // Independent replay: at every admission, project each later iteration
    // from the query records and compare with the simulated end times.
    let iters = &r.iterations;
    let admissions: Vec<f64> = r.queries.iter().filter_map(|q| q.scheduled_at).collect();
    let is_anchor = |t: f64| admissions.contains(&t);
    let (mut anchors, mut checked, mut worst) = (0, 0, 0.0f64);
    let mut i = 0;
    while i < iters.len() {
        let a = &iters[i];
        ensure!(
            is_anchor(a.start),
            "iteration at {} starts without an admission",
            a.start
        );
        anchors += 1;
        let active: Vec<(u32, u32, u64)> = r
            .queries
            .iter()
            .filter(|q| {
                q.scheduled_at.is_some_and(|s| s <= a.start)
                    && q.completed_at.is_some_and(|c| c > a.start)
            })
            .map(|q| {
                let s = q.scheduled_at.unwrap();
                let done = iters
                    .iter()
                    .filter(|it| it.start >= s && it.start < a.start)
                    .count() as u64;
                (q.prompt_len, q.tokens, done)
            })
            .collect();
        let mut tr = 0.0;
        let mut d = 0u64;
        loop {
            let it = &iters[i];
            let (mut batch, mut kv) = (0u32, 0u32);
            for &(prompt, tokens, done) in &active {
                if done + d < tokens as u64 {
                    batch += 1;
                    kv += (prompt as u64 + done + d).div_ceil(64) as u32;
                }
            }
            ensure!(
                (it.batch, it.kv_blocks, it.effective_mhz) == (batch, kv, a.effective_mhz),
                "iteration at {}: simulated (b {}, kv {}, {} MHz), projected (b {batch}, kv {kv}, {} MHz)",
                it.start, it.batch, it.kv_blocks, it.effective_mhz, a.effective_mhz
            );
            tr += 1.0
                / models
                    .engine
                    .predict_ips(2, batch, kv, a.effective_mhz as f64);
            worst = worst.max((it.end - (a.start + tr)).abs());
            checked += 1;
            d += 1;
            i += 1;
            if i == iters.len() || is_anchor(iters[i].start) {
                break;
            }
        }
    }
    ensure!(worst <= 1e-9, "replay drift {worst:e} s");
    Ok(format!(
        "{checked} iterations from {anchors} admissions, max drift {worst:.1e} s; simulator audit {:.1e} s over {} completions",
        r.totals.max_drift_s, r.totals.drift_samples
    ))
}

// ---------------------------------------------------------------- 3

/// The SLO predicate written out from the definitions: mean projected TBT
/// within SLO, and every non-lost query's projected finish strictly before
/// its deadline.
fn slo_holds(
    proj: &ProjectionSet,
    entries: &[ScoreboardEntry],
    k: u64,
    deadlines: &BTreeMap<u64, f64>,
    model: &dyn PerfModel,
    slo: &SloConfig,
    f: u32,
) -> bool {
    let tbt: Vec<f64> = proj
        .batch()
        .iter()
        .zip(proj.kv())
        .map(|(&b, &kv)| 1.0 / model.predict_ips(4, b, kv, f as f64))
        .collect();
    if tbt.iter().sum::<f64>() / tbt.len() as f64 > slo.tbt_slo {
        return false;
    }
    let mut cum = Vec::with_capacity(tbt.len());
    let mut acc = 0.0;
    for t in &tbt {
        acc += t;
        cum.push(acc);
    }
    entries.iter().filter(|e| !e.lost).all(|e| {
        deadlines[&e.query_id] - cum[(e.sched_iter + e.pred_gen as u64 - k - 1) as usize] > 0.0
    })
}

fn c3_binary_search() -> Outcome {
    let models = ModelSet::reference();
    let model = models.predictor.as_ref();
    let domain = FrequencyDomain::default();
    let levels = domain.levels();
    ensure!(
        levels.len() == 81,
        "default domain has {} levels",
        levels.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut states, mut interior, mut infeasible, mut max_evals) = (0, 0, 0, 0);
    for _ in 0..300 {
        let k = rng.random_range(0..1000u64);
        let mut sb = Scoreboard::at_iteration(64, k).unwrap();
        let mut entries = Vec::new();
        for id in 0..rng.random_range(1..=64u64) {
            let pred_gen = rng.random_range(1..=1024u32);
            let back = rng.random_range(0..pred_gen as u64).min(k);
            let e = ScoreboardEntry {
                query_id: id,
                sched_iter: k - back,
                prompt_len: rng.random_range(1..=2048),
                pred_gen,
                lost: false,
            };
            sb.insert(e).unwrap();
            entries.push(e);
        }
        let proj = sb.project();
        // deadlines placed around the finish time at a random clock
        let pivot = levels[rng.random_range(0..levels.len())] as f64;
        let mut acc = 0.0;
        let cum: Vec<f64> = proj
            .batch()
            .iter()
            .zip(proj.kv())
            .map(|(&b, &kv)| {
                acc += 1.0 / model.predict_ips(4, b, kv, pivot);
                acc
            })
            .collect();
        let deadlines: BTreeMap<u64, f64> = entries
            .iter()
            .map(|e| {
                let finish = cum[(e.end_iter() - k - 1) as usize];
                (e.query_id, finish * rng.random_range(0.9..2.0))
            })
            .collect();
        let slo = SloConfig::new(rng.random_range(0.015..0.06), 30.0).unwrap();
        let st = ThrottleState {
            proj: &proj,
            sb: &sb,
            deadlines: &deadlines,
            tp: 4,
            model,
            slo: &slo,
            now: 0.0,
            headroom: 0.0,
        };
        let scan = levels
            .iter()
            .copied()
            .find(|&f| slo_holds(&proj, &entries, k, &deadlines, model, &slo, f));
        let got = min_slo_frequency(&st, &domain);
        match (scan, &got) {
            (Some(f), Ok(d)) => {
                ensure!(
                    d.target_mhz == f,
                    "state {states}: search {} MHz, scan {f} MHz",
                    d.target_mhz
                );
                ensure!(
                    d.evaluations <= 8,
                    "state {states}: {} evaluations",
                    d.evaluations
                );
                max_evals = max_evals.max(d.evaluations);
                if f != domain.min_mhz && f != domain.max_mhz {
                    interior += 1;
                }
            }
            (None, Err(_)) => infeasible += 1,
            _ => return Err(format!("state {states}: search {got:?}, scan {scan:?}")),
        }
        states += 1;
    }
    ensure!(
        interior >= 100,
        "only {interior} states with an interior answer"
    );
    Ok(format!(
        "{states} states ({interior} interior, {infeasible} infeasible) match the linear scan, max {max_evals} evaluations"
    ))
}

// ---------------------------------------------------------------- 4

fn c4_slo_adherence() -> Outcome {
    let models = ModelSet::reference();
    let profiles = llama13();
    let mut detail = Vec::new();
    for tp in [2, 4] {
        let cap = profiles.iter().find(|p| p.tp == tp).unwrap().max_load_rps;
        let cfg = SimConfig {
            prefill: no_prefill(),
            ..fixed(tp)
        };
        let (mut served, mut lost, mut worst_tbt) = (0, 0, 0.0f64);
        for seed in 0..3 {
            let raw = synthesize_trace(&TraceSpec {
                duration: 300.0,
                rps_profile: RpsProfile::constant(cap),
                seed,
                ..TraceSpec::default()
            })
            .unwrap();
            // peak 10 s load at the profile's rated maximum
            let trace = scale_trace(&raw, cap, 10.0).unwrap();
            let r = run(&cfg, &trace, &models, &profiles).unwrap();
            let slo = r.slo.e2e_slo;
            let mut violations = 0;
            for q in r.queries.iter().filter(|q| q.completed_at.is_some()) {
                served += 1;
                if q.lost || q.demoted {
                    lost += 1;
                } else if q.completed_at.unwrap() - q.arrival > slo {
                    violations += 1;
                }
            }
            ensure!(
                violations == 0,
                "TP{tp} seed {seed}: {violations} E2E violations"
            );
            let m = ecoserve::report::aggregate(&r).unwrap();
            ensure!(
                m.tbt_mean <= 0.2,
                "TP{tp} seed {seed}: mean TBT {}",
                m.tbt_mean
            );
            worst_tbt = worst_tbt.max(m.tbt_mean);
        }
        detail.push(format!(
            "TP{tp} @ peak {cap} RPS: {served} served, {lost} lost, 0 violations, TBT <= {:.0} ms",
            worst_tbt * 1e3
        ));
    }

    // TP1's 120-block KV capacity: queueing is dominated by KV refusals
    let cfg = SimConfig {
        prefill: no_prefill(),
        ..fixed(1)
    };
    let trace = synthesize_trace(&TraceSpec {
        duration: 300.0,
        rps_profile: RpsProfile::constant(1.0),
        ..TraceSpec::default()
    })
    .unwrap();
    let r = run(&cfg, &trace, &models, &profiles).unwrap();
    let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
    for a in r.audit.iter().filter(|a| a.decision.starts_with("queued")) {
        *reasons.entry(a.decision.as_str()).or_default() += 1;
    }
    let kv = reasons.get("queued_kv").copied().unwrap_or(0);
    let total: usize = reasons.values().sum();
    ensure!(kv * 2 > total, "TP1 queueing not KV-dominated: {reasons:?}");
    detail.push(format!(
        "TP1 (120 blocks): {kv}/{total} queue decisions are KV"
    ));
    Ok(detail.join("; "))
}

// ---------------------------------------------------------------- 5

fn compare_cells(config: &str, out: &Path) -> Result<BTreeMap<String, serde_json::Value>, String> {
    let cfg = repo().join("configs").join(config);
    let code = ecoserve(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "compare",
    ])?;
    ensure!(code == 0, "compare exited {code}");
    let doc = read_json(&out.join("comparison.json"));
    Ok(doc["cells"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["name"].as_str().unwrap().to_string(), c.clone()))
        .collect())
}

fn c5_energy() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let f = |c: &serde_json::Value, k: &str| c["comparison"][k].as_f64().unwrap();

    let mid = compare_cells("mid_load.toml", &tmp.path().join("mid"))?;
    let thr = &mid["throttle"];
    let mid_red = f(thr, "energy_reduction_pct");
    ensure!(mid_red >= 10.0, "mid-load throttle saves {mid_red:.1}%");
    ensure!(
        thr["comparison"]["slo_compliant"] == true,
        "mid-load throttle run not SLO-compliant"
    );

    let shaped = compare_cells("shaped.toml", &tmp.path().join("shaped"))?;
    let (a, t, c) = (
        &shaped["autoscale"],
        &shaped["throttle"],
        &shaped["combined"],
    );
    let (ra, rt, rc) = (
        f(a, "energy_reduction_pct"),
        f(t, "energy_reduction_pct"),
        f(c, "energy_reduction_pct"),
    );
    ensure!(
        ra > 0.0 && rt > 0.0,
        "single mechanisms: autoscale {ra:.1}%, throttle {rt:.1}%"
    );
    ensure!(
        rc > ra && rc > rt,
        "combined {rc:.1}% vs autoscale {ra:.1}%, throttle {rt:.1}%"
    );
    let tpj = f(c, "tpj_ratio");
    ensure!(tpj >= 1.3, "combined TPJ ratio {tpj:.3}");
    ensure!(
        c["comparison"]["slo_compliant"] == true,
        "combined run not SLO-compliant"
    );
    Ok(format!(
        "mid-load throttle -{mid_red:.1}% (compliant); shaped: autoscale -{ra:.1}%, throttle -{rt:.1}%, combined -{rc:.1}%, TPJ x{tpj:.2}"
    ))
}

// ---------------------------------------------------------------- 6

fn c6_model_validation() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().to_str().unwrap();
    ensure!(
        ecoserve(&["--out", out, "--split", "0.9", "calibrate"])? == 0,
        "calibrate failed"
    );
    let doc = read_json(&tmp.path().join("calibration.json"));
    let r2 = doc["holdout"]["r2"].as_f64().unwrap();
    let mae = doc["holdout"]["mae"].as_f64().unwrap();
    ensure!(doc["split"] == 0.9, "split {}", doc["split"]);
    ensure!(
        r2 >= 0.97 && mae <= 1.0,
        "holdout R² {r2:.4}, MAE {mae:.3} IPS"
    );
    Ok(format!(
        "{} train / {} holdout rows: R² {r2:.4}, MAE {mae:.3} IPS",
        doc["train_rows"], doc["holdout_rows"]
    ))
}

// ---------------------------------------------------------------- 7

/// Evenly spaced 100/100-token queries following `rate(t)`.
fn paced_trace(duration: f64, rate: impl Fn(f64) -> f64) -> Vec<Query> {
    let mut out = Vec::new();
    let mut t = 0.0;
    while t < duration {
        out.push(Query::new(out.len() as u64, t, 100, 100));
        t += 1.0 / rate(t);
    }
    out
}

fn readies(r: &RunResult) -> Vec<(f64, u32)> {
    r.engines
        .iter()
        .filter(|e| e.state == "transition_serving")
        .map(|e| (e.time, e.tp))
        .collect()
}

/// Integrates each engine's draw exactly from iteration records (busy) and
/// state rows (idle otherwise); spawning and draining time is shadow.
fn reintegrate(r: &RunResult, models: &ModelSet) -> (f64, f64) {
    let mut ids: Vec<usize> = r.engines.iter().map(|e| e.engine).collect();
    ids.sort();
    ids.dedup();
    let (mut total, mut shadow) = (0.0, 0.0);
    for id in ids {
        let states: Vec<_> = r.engines.iter().filter(|e| e.engine == id).collect();
        let busy: Vec<_> = r.iterations.iter().filter(|i| i.engine == id).collect();
        let idle = engine_idle_power(models.power.as_ref(), states[0].tp);
        let mut cuts: Vec<f64> = states.iter().map(|s| s.time).collect();
        cuts.extend(busy.iter().flat_map(|i| [i.start, i.end]));
        cuts.push(r.totals.end_time);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        for w in cuts.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let Some(state) = states.iter().rev().find(|s| s.time <= mid) else {
                continue;
            };
            if state.state == "retired" {
                continue;
            }
            let watts = busy
                .iter()
                .find(|i| i.start <= mid && mid < i.end)
                .map_or(idle, |i| i.watts);
            let j = watts * (w[1] - w[0]);
            total += j;
            if matches!(state.state.as_str(), "spawning" | "draining") {
                shadow += j;
            }
        }
    }
    (total, shadow)
}

fn c7_autoscaler() -> Outcome {
    let models = ModelSet::reference();
    let profiles = llama13();
    let cfg = SimConfig::default();
    let (window, spawn) = (cfg.monitor_window, profiles[2].spawn_time);

    let step = paced_trace(200.0, |t| if t < 100.0 { 1.0 } else { 5.0 });
    let r = run(&cfg, &step, &models, &profiles).unwrap();
    let ready = readies(&r);
    let &(t_up, tp_up) = ready.first().ok_or("no upscale on the step trace")?;
    ensure!(r.engines[0].tp <= 2, "started on TP{}", r.engines[0].tp);
    ensure!(
        tp_up == 4 && t_up > 100.0 && t_up <= 100.0 + window + spawn,
        "first ready {ready:?}"
    );

    let saw = paced_trace(400.0, |t| if t % 16.0 < 8.0 { 0.5 } else { 7.0 });
    let r = run(&cfg, &saw, &models, &profiles).unwrap();
    let down_in_grace = r
        .ticks
        .iter()
        .filter(|t| matches!(t.decision, ScaleDecision::SpawnSmaller(_)) && t.grace_active)
        .count();
    ensure!(
        down_in_grace == 0,
        "{down_in_grace} downscales during grace"
    );
    let ready = readies(&r);
    let min_gap = ready
        .windows(2)
        .map(|w| w[1].0 - w[0].0)
        .fold(f64::INFINITY, f64::min);
    ensure!(
        min_gap >= spawn,
        "engine switches {min_gap:.1} s apart: {ready:?}"
    );

    let up_down = paced_trace(300.0, |t| {
        if t < 100.0 {
            1.0
        } else if t < 200.0 {
            5.0
        } else {
            0.5
        }
    });
    let r = run(&cfg, &up_down, &models, &profiles).unwrap();
    let (total, shadow) = reintegrate(&r, &models);
    ensure!(shadow > 0.0, "no shadow energy");
    let err = (shadow - r.totals.shadow_energy_j).abs() / shadow;
    let err_total = (total - r.totals.energy_j).abs() / total;
    ensure!(
        err <= 1e-3 && err_total <= 1e-3,
        "shadow error {err:.2e}, total error {err_total:.2e}"
    );
    Ok(format!(
        "step: TP{tp_up} ready {:.1} s after the step (limit {}); sawtooth: {} switches, >= {min_gap:.1} s apart, 0 downscales in grace; shadow {:.0} J, rel. error {err:.1e}",
        t_up - 100.0,
        window + spawn,
        ready.len(),
        shadow
    ))
}

// ---------------------------------------------------------------- 8

fn read_matrix(path: &Path) -> (Vec<u32>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let freqs = lines
        .next()
        .unwrap()
        .split(',')
        .skip(1)
        .map(|s| s.parse().unwrap())
        .collect();
    let rows = lines
        .map(|l| l.split(',').skip(1).map(|s| s.parse().unwrap()).collect())
        .collect();
    (freqs, rows)
}

fn c8_sweep_shapes() -> Outcome {
    let tmp = TempDir::new().unwrap();
    ensure!(
        ecoserve(&["--out", tmp.path().to_str().unwrap(), "sweep"])? == 0,
        "sweep failed"
    );
    let m = |name: &str| read_matrix(&tmp.path().join(format!("sweep_{name}.csv")));
    let (freqs, tps) = m("tps");
    let (_, e2e) = m("e2e");
    let (_, tbt) = m("tbt");
    let (_, watts) = m("watts");
    let (_, tpj) = m("tpj");
    let (nb, nf) = (tps.len(), freqs.len());
    ensure!(nb == 32 && nf == 81, "{nb} x {nf} matrix");
    for b in 0..nb {
        for f in 0..nf {
            if b + 1 < nb {
                ensure!(
                    tps[b + 1][f] >= tps[b][f],
                    "TPS drops with batch at {} MHz",
                    freqs[f]
                );
                ensure!(
                    e2e[b + 1][f] > e2e[b][f] && tbt[b + 1][f] > tbt[b][f],
                    "latency not increasing in batch at {} MHz",
                    freqs[f]
                );
            }
            if f + 1 < nf {
                ensure!(
                    tps[b][f + 1] >= tps[b][f],
                    "TPS drops with frequency at batch {}",
                    b + 1
                );
            }
        }
    }
    let mut spread = 1.0f64;
    for f in 0..nf {
        let col = watts.iter().map(|row| row[f]);
        let (lo, hi) = col.fold((f64::MAX, 0.0f64), |(l, h), w| (l.min(w), h.max(w)));
        spread = spread.max(hi / lo);
    }
    ensure!(
        spread < 1.10,
        "power varies {:.1}% across batch",
        (spread - 1.0) * 100.0
    );
    let mut peaks = Vec::new();
    for (b, row) in tpj.iter().enumerate() {
        let p = (0..nf).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
        ensure!(
            p > 0 && p < nf - 1,
            "batch {}: TPJ peak at the domain edge",
            b + 1
        );
        ensure!(
            row[..=p].windows(2).all(|w| w[1] >= w[0]) && row[p..].windows(2).all(|w| w[1] <= w[0]),
            "batch {}: TPJ not unimodal",
            b + 1
        );
        peaks.push(freqs[p]);
    }
    let (lo, hi) = (peaks.iter().min().unwrap(), peaks.iter().max().unwrap());
    Ok(format!(
        "32 x 81 matrices; TPJ peaks interior at {lo}-{hi} MHz; power spread across batch {:.1}%",
        (spread - 1.0) * 100.0
    ))
}

// ---------------------------------------------------------------- 9

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn c9_determinism() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let cfg = repo().join("configs/mid_load.toml");
    let commands: [&[&str]; 6] = [
        &["simulate"],
        &["compare"],
        &["sweep"],
        &["gen-trace"],
        &["calibrate"],
        &["validate-model"],
    ];
    let mut files = 0;
    for cmd in commands {
        let out = tmp.path().join(cmd[0]);
        let mut args = vec![
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(cmd);
        if cmd[0] == "validate-model" {
            ensure!(
                ecoserve(&[&args[..4], &["--out", out.to_str().unwrap(), "calibrate"]].concat())?
                    == 0,
                "calibrate failed"
            );
        }
        ensure!(ecoserve(&args)? == 0, "{} failed", cmd[0]);
        let first = snapshot(&out);
        ensure!(ecoserve(&args)? == 0, "{} failed on rerun", cmd[0]);
        let second = snapshot(&out);
        ensure!(
            first.keys().eq(second.keys()),
            "{}: different file sets",
            cmd[0]
        );
        for (p, bytes) in &first {
            ensure!(
                second[p] == *bytes,
                "{}: {} differs between runs",
                cmd[0],
                p.display()
            );
        }
        files += first.len();
    }
    Ok(format!(
        "6 commands rerun with seed 11: {files} output files byte-identical"
    ))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 9] = [
        (
            "1. projection exactness",
            Duration::from_secs(60),
            c1_projection_exactness,
        ),
        ("2. zero drift", Duration::from_secs(60), c2_zero_drift),
        (
            "3. binary-search correctness",
            Duration::from_secs(10),
            c3_binary_search,
        ),
        (
            "4. SLO adherence",
            Duration::from_secs(120),
            c4_slo_adherence,
        ),
        (
            "5. energy direction and magnitude",
            Duration::from_secs(300),
            c5_energy,
        ),
        (
            "6. model validation protocol",
            Duration::from_secs(30),
            c6_model_validation,
        ),
        (
            "7. autoscaler behaviour",
            Duration::from_secs(60),
            c7_autoscaler,
        ),
        ("8. sweep shapes", Duration::from_secs(30), c8_sweep_shapes),
        ("9. determinism", Duration::from_secs(60), c9_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > limit => Err(format!(
                "took {:.1} s, limit {} s",
                elapsed.as_secs_f64(),
                limit.as_secs()
            )),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail} ({:.2} s)", elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail} ({:.2} s)", elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
