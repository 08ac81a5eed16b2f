//! Command-line driver: simulations, the four-cell comparison, sweeps,
//! trace generation and model calibration from one TOML run spec.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;

pub use config::{Overrides, RunSpec};

/// Exit code for a run that finished but missed its SLO under `--enforce-slo`.
pub const EXIT_SLO: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ecoserve",
    version,
    about = "SLO-aware, energy-efficient LLM serving simulator"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run spec (TOML). Every section is optional.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Maximum clock, KV-only admission, fixed engine.
    #[arg(long, global = true)]
    pub baseline: bool,
    #[arg(long, global = true)]
    pub no_autoscale: bool,
    #[arg(long, global = true)]
    pub no_throttle: bool,
    /// Exit with status 2 when the run is not SLO-compliant.
    #[arg(long, global = true)]
    pub enforce_slo: bool,
    /// Rescale the trace so its peak windowed RPS equals this value.
    #[arg(long, global = true, value_name = "RPS")]
    pub scale_peak: Option<f64>,
    /// Training fraction for calibrate and validate-model.
    #[arg(long, global = true, value_name = "FRAC")]
    pub split: Option<f64>,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            baseline: self.baseline,
            no_autoscale: self.no_autoscale,
            no_throttle: self.no_throttle,
            scale_peak: self.scale_peak,
            split: self.split,
        }
    }

    /// Loads the config (or defaults) and applies the flags.
    pub fn spec(&self) -> Result<RunSpec> {
        let spec = match &self.config {
            Some(p) => RunSpec::load(p)?,
            None => RunSpec::default(),
        };
        spec.resolve(&self.overrides())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation and export its metrics and time series.
    Simulate,
    /// Baseline, autoscale-only, throttle-only and combined runs on one trace.
    Compare,
    /// Batch × frequency sweep of fixed-length queries.
    Sweep,
    /// Fit a throughput/power model from a profiling dataset.
    Calibrate,
    /// Score a fitted model on a split of the profiling dataset.
    ValidateModel {
        #[arg(long, value_enum, default_value_t = Rows::Holdout)]
        rows: Rows,
    },
    /// Write the (optionally rescaled) trace.
    GenTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Rows {
    Train,
    Holdout,
    All,
}

/// Parses `args` (program name first) and runs the command, printing to
/// stdout. Returns the process exit code; configuration and I/O failures
/// are errors.
pub fn run<I, T>(args: I) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_to(args, &mut io::stdout().lock())
}

/// [`run`] with command output sent to `out`.
pub fn run_to<I, T>(args: I, out: &mut dyn Write) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}")?;
            return Ok(0);
        }
        Err(e) => {
            let msg = e.render().to_string();
            return Err(anyhow::anyhow!(msg
                .trim_start_matches("error: ")
                .trim_end()
                .to_string()));
        }
    };
    let spec = cli.global.spec()?;
    let enforce = cli.global.enforce_slo;
    match cli.command {
        Command::Simulate => commands::simulate(&spec, out, enforce),
        Command::Compare => commands::compare(&spec, out, enforce),
        Command::Sweep => commands::sweep(&spec, out),
        Command::Calibrate => commands::calibrate(&spec, out),
        Command::ValidateModel { rows } => commands::validate_model(&spec, out, rows),
        Command::GenTrace => commands::gen_trace(&spec, out),
    }
}

/// [`run`] with errors reported on stderr as exit code 1.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
