use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ecoserve::par;
use ecoserve::perfmodel::dataset::{synthesize_dataset, SweepGrid};
use ecoserve::perfmodel::{
    validate, FittedModels, ModelMetrics, ProfileDataset, ReferencePower, SurrogateModel,
};
use ecoserve::report::{self, ComparisonReport, MetricsSummary};
use ecoserve::sim::{self, SimConfig};
use ecoserve::sweep::run_sweep;
use ecoserve::trace::{peak_rps, write_trace};
use log::info;
use serde::Serialize;

use crate::{Rows, RunSpec, EXIT_SLO};

pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const MODEL_FILE: &str = "model.csv";
pub const DATASET_FILE: &str = "dataset.csv";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const VALIDATION_FILE: &str = "validation.json";

/// Names and configs of the comparison grid, baseline first.
pub fn comparison_cells(base: &SimConfig) -> Vec<(&'static str, SimConfig)> {
    let fixed = SimConfig {
        autoscaling: false,
        ..base.clone()
    };
    vec![
        (
            "baseline",
            SimConfig {
                baseline_mode: true,
                ..fixed.clone()
            },
        ),
        (
            "autoscale",
            SimConfig {
                throttle: false,
                slo_admission: false,
                autoscaling: true,
                baseline_mode: false,
                ..base.clone()
            },
        ),
        (
            "throttle",
            SimConfig {
                throttle: true,
                baseline_mode: false,
                ..fixed
            },
        ),
        (
            "combined",
            SimConfig {
                throttle: true,
                autoscaling: true,
                baseline_mode: false,
                ..base.clone()
            },
        ),
    ]
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_summary(w: &mut dyn Write, label: &str, m: &MetricsSummary) -> Result<()> {
    writeln!(
        w,
        "{label}: served {}/{} energy {:.1} kJ tpj {:.4} e2e_p99 {:.2} s (slo {:.1}) tbt {:.1} ms compliant {}",
        m.served,
        m.queries,
        m.energy_total / 1e3,
        m.tpj,
        m.e2e_p99,
        m.slo.e2e_slo,
        m.tbt_mean * 1e3,
        m.slo_compliant
    )?;
    Ok(())
}

pub fn simulate(spec: &RunSpec, out: &mut dyn Write, enforce_slo: bool) -> Result<i32> {
    let trace = spec.trace()?;
    let models = spec.models()?;
    let profiles = spec.profiles()?;
    spec.echo(&spec.out)?;
    info!("simulating {} queries", trace.len());
    let run = sim::run(&spec.sim, &trace, &models, &profiles)?;
    let summary = report::aggregate(&run)?;
    report::export(&run, &summary, &spec.out)?;
    print_summary(out, "run", &summary)?;
    Ok(if enforce_slo && !summary.slo_compliant {
        EXIT_SLO
    } else {
        0
    })
}

#[derive(Debug, Serialize)]
pub struct CellReport {
    pub name: String,
    pub metrics: MetricsSummary,
    pub comparison: ComparisonReport,
}

#[derive(Debug, Serialize)]
pub struct ComparisonDoc {
    pub schema_version: u32,
    pub seed: u64,
    pub cells: Vec<CellReport>,
}

#[derive(Serialize)]
struct ComparisonRow<'a> {
    cell: &'a str,
    energy_j: f64,
    tpj: f64,
    e2e_p99: f64,
    tbt_mean: f64,
    energy_reduction_pct: f64,
    tpj_ratio: f64,
    e2e_p99_delta: f64,
    tbt_delta: f64,
    slo_compliant: bool,
}

pub fn compare(spec: &RunSpec, out: &mut dyn Write, enforce_slo: bool) -> Result<i32> {
    let trace = spec.trace()?;
    let models = spec.models()?;
    let profiles = spec.profiles()?;
    spec.echo(&spec.out)?;
    let cells = comparison_cells(&spec.sim);
    let summaries = par::map(&cells, |(name, cfg)| -> Result<MetricsSummary> {
        info!("cell {name}");
        let run = sim::run(cfg, &trace, &models, &profiles)?;
        let summary = report::aggregate(&run)?;
        report::export(&run, &summary, &spec.out.join(name))?;
        Ok(summary)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let baseline = &summaries[0];
    let mut doc = ComparisonDoc {
        schema_version: report::SCHEMA_VERSION,
        seed: spec.seed,
        cells: Vec::new(),
    };
    let csv_path = spec.out.join(COMPARISON_CSV);
    let mut w = csv::Writer::from_path(&csv_path)
        .with_context(|| format!("writing {}", csv_path.display()))?;
    for ((name, _), m) in cells.iter().zip(&summaries) {
        let c = report::compare(baseline, m)?;
        w.serialize(ComparisonRow {
            cell: name,
            energy_j: m.energy_total,
            tpj: m.tpj,
            e2e_p99: m.e2e_p99,
            tbt_mean: m.tbt_mean,
            energy_reduction_pct: c.energy_reduction_pct,
            tpj_ratio: c.tpj_ratio,
            e2e_p99_delta: c.e2e_p99_delta,
            tbt_delta: c.tbt_delta,
            slo_compliant: c.slo_compliant,
        })?;
        print_summary(out, name, m)?;
        if *name != "baseline" {
            writeln!(
                out,
                "  vs baseline: energy -{:.1}% tpj x{:.2}",
                c.energy_reduction_pct, c.tpj_ratio
            )?;
        }
        doc.cells.push(CellReport {
            name: name.to_string(),
            metrics: m.clone(),
            comparison: c,
        });
    }
    w.flush()?;
    write_json(&spec.out.join(COMPARISON_JSON), &doc)?;
    let combined = &summaries[3];
    Ok(if enforce_slo && !combined.slo_compliant {
        EXIT_SLO
    } else {
        0
    })
}

pub fn sweep(spec: &RunSpec, out: &mut dyn Write) -> Result<i32> {
    let models = spec.models()?;
    spec.echo(&spec.out)?;
    let r = run_sweep(&spec.sweep, models.engine.as_ref(), models.power.as_ref())?;
    r.write(&spec.out)?;
    for bi in [0, r.batches.len() - 1] {
        let best = (0..r.freqs.len())
            .max_by(|&a, &b| r.cell(bi, a).tpj.total_cmp(&r.cell(bi, b).tpj))
            .expect("non-empty domain");
        let c = r.cell(bi, best);
        writeln!(
            out,
            "batch {}: peak tpj {:.4} at {} MHz ({:.0} W, {:.1} tok/s)",
            c.batch, c.tpj, c.freq_mhz, c.watts, c.tps
        )?;
    }
    Ok(0)
}

/// The configured profiling dataset, or one sampled from the surrogate.
pub fn dataset(spec: &RunSpec) -> Result<ProfileDataset> {
    let c = &spec.calibrate;
    match &c.dataset {
        Some(p) => {
            ProfileDataset::load(p).with_context(|| format!("loading dataset {}", p.display()))
        }
        None => {
            let truth = SurrogateModel::new(spec.model.surrogate.clone())?;
            let power = ReferencePower::new(spec.model.power.clone())?;
            let grid = SweepGrid::standard(c.tps.clone());
            Ok(synthesize_dataset(
                &truth,
                Some(&power),
                &grid,
                c.noise,
                spec.seed,
            )?)
        }
    }
}

fn model_path(spec: &RunSpec) -> PathBuf {
    spec.model
        .file
        .clone()
        .unwrap_or_else(|| spec.out.join(MODEL_FILE))
}

#[derive(Debug, Serialize)]
pub struct CalibrationDoc {
    pub seed: u64,
    pub split: f64,
    pub train_rows: usize,
    pub holdout_rows: usize,
    pub model_file: PathBuf,
    pub train: ModelMetrics,
    pub holdout: ModelMetrics,
}

pub fn calibrate(spec: &RunSpec, out: &mut dyn Write) -> Result<i32> {
    let ds = dataset(spec)?;
    spec.echo(&spec.out)?;
    if spec.calibrate.dataset.is_none() {
        ds.save(spec.out.join(DATASET_FILE))?;
    }
    let (train, holdout) = ds.split(spec.calibrate.split, spec.seed)?;
    let fitted = FittedModels::fit(&train)?;
    let path = model_path(spec);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fitted.save(&path)?;
    let doc = CalibrationDoc {
        seed: spec.seed,
        split: spec.calibrate.split,
        train_rows: train.ips.len(),
        holdout_rows: holdout.ips.len(),
        model_file: path,
        train: validate(&fitted.perf, &train)?,
        holdout: validate(&fitted.perf, &holdout)?,
    };
    write_json(&spec.out.join(CALIBRATION_FILE), &doc)?;
    writeln!(
        out,
        "fitted {} rows -> {}; holdout r2 {:.4} mae {:.3} ips mape {:.2}%",
        doc.train_rows,
        doc.model_file.display(),
        doc.holdout.r2,
        doc.holdout.mae,
        doc.holdout.mape
    )?;
    Ok(0)
}

#[derive(Debug, Serialize)]
pub struct ValidationDoc {
    pub seed: u64,
    pub split: f64,
    pub rows: String,
    pub model_file: PathBuf,
    pub metrics: ModelMetrics,
}

pub fn validate_model(spec: &RunSpec, out: &mut dyn Write, rows: Rows) -> Result<i32> {
    let path = model_path(spec);
    let fitted = FittedModels::load(&path)
        .with_context(|| format!("loading fitted model {}", path.display()))?;
    let ds = dataset(spec)?;
    let (train, holdout) = ds.split(spec.calibrate.split, spec.seed)?;
    let (label, rows) = match rows {
        Rows::Train => ("train", train),
        Rows::Holdout => ("holdout", holdout),
        Rows::All => ("all", ds),
    };
    let doc = ValidationDoc {
        seed: spec.seed,
        split: spec.calibrate.split,
        rows: label.into(),
        model_file: path,
        metrics: validate(&fitted.perf, &rows)?,
    };
    fs::create_dir_all(&spec.out)?;
    write_json(&spec.out.join(VALIDATION_FILE), &doc)?;
    writeln!(
        out,
        "{label} rows {}: r2 {:.4} mae {:.3} ips mape {:.2}%",
        doc.metrics.samples, doc.metrics.r2, doc.metrics.mae, doc.metrics.mape
    )?;
    Ok(0)
}

pub fn gen_trace(spec: &RunSpec, out: &mut dyn Write) -> Result<i32> {
    let trace = spec.raw_trace()?;
    spec.echo(&spec.out)?;
    let path = spec.out.join(TRACE_FILE);
    write_trace(&path, &trace)?;
    writeln!(
        out,
        "{} queries, peak {:.3} RPS over {} s windows -> {}",
        trace.len(),
        peak_rps(&trace, spec.trace.peak_window),
        spec.trace.peak_window,
        path.display()
    )?;
    Ok(0)
}
