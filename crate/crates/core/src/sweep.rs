//! Batch × frequency sweep of fixed-length queries decoded together.
//!
//! Each cell runs `batch` identical queries from their first generated
//! token to the last, so every query sees the same iteration times.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::perfmodel::{engine_power, FrequencyDomain, PerfModel, PowerModel};
use crate::projection::DEFAULT_TOKENS_PER_BLOCK;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub tp: u32,
    pub max_batch: u32,
    pub prompt_len: u32,
    pub gen_len: u32,
    pub tokens_per_block: u32,
    pub frequency: FrequencyDomain,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            tp: 2,
            max_batch: 32,
            prompt_len: 1,
            gen_len: 1024,
            tokens_per_block: DEFAULT_TOKENS_PER_BLOCK,
            frequency: FrequencyDomain::default(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tp == 0 || self.max_batch == 0 || self.gen_len == 0 || self.tokens_per_block == 0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate sweep spec {self:?}"
            )));
        }
        self.frequency.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub batch: u32,
    pub freq_mhz: u32,
    /// Generated tokens per second across the batch.
    pub tps: f64,
    pub e2e: f64,
    pub tbt: f64,
    /// Time-averaged engine power.
    pub watts: f64,
    pub tpj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub batches: Vec<u32>,
    pub freqs: Vec<u32>,
    /// Row-major: `cells[b * freqs.len() + f]`.
    pub cells: Vec<SweepCell>,
}

pub const METRICS: [&str; 5] = ["tps", "e2e", "tbt", "watts", "tpj"];

impl SweepResult {
    pub fn cell(&self, bi: usize, fi: usize) -> &SweepCell {
        &self.cells[bi * self.freqs.len() + fi]
    }

    /// One metric as a `batches × freqs` matrix.
    pub fn matrix(&self, metric: &str) -> Result<Vec<Vec<f64>>> {
        let pick: fn(&SweepCell) -> f64 = match metric {
            "tps" => |c| c.tps,
            "e2e" => |c| c.e2e,
            "tbt" => |c| c.tbt,
            "watts" => |c| c.watts,
            "tpj" => |c| c.tpj,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown sweep metric `{other}`"
                )))
            }
        };
        Ok(self
            .cells
            .chunks(self.freqs.len())
            .map(|row| row.iter().map(pick).collect())
            .collect())
    }

    /// Matrix as CSV: a `batch` column then one column per frequency.
    pub fn to_csv(&self, metric: &str) -> Result<String> {
        let m = self.matrix(metric)?;
        let mut out = String::from("batch");
        for f in &self.freqs {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
        for (b, row) in self.batches.iter().zip(&m) {
            let _ = write!(out, "{b}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `sweep_<metric>.csv` for every metric.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        METRICS
            .iter()
            .map(|m| {
                let p = dir.join(format!("sweep_{m}.csv"));
                fs::write(&p, self.to_csv(m)?).map_err(|e| Error::io(&p, e))?;
                Ok(p)
            })
            .collect()
    }
}

/// Decodes one cell token by token.
pub fn run_cell(
    spec: &SweepSpec,
    batch: u32,
    freq_mhz: u32,
    perf: &dyn PerfModel,
    power: &dyn PowerModel,
) -> Result<SweepCell> {
    let f = freq_mhz as f64;
    let (mut t, mut joules) = (0.0, 0.0);
    for g in 0..spec.gen_len {
        let kv = batch * (spec.prompt_len + g).div_ceil(spec.tokens_per_block);
        let ips = perf.predict_ips(spec.tp, batch, kv, f);
        if !(ips > 0.0 && ips.is_finite()) {
            return Err(Error::ModelContract(format!(
                "IPS {ips} at tp {} batch {batch} kv {kv} f {f}",
                spec.tp
            )));
        }
        let dt = 1.0 / ips;
        t += dt;
        joules += engine_power(power, spec.tp, f, kv) * dt;
    }
    let tokens = (batch * spec.gen_len) as f64;
    let watts = joules / t;
    Ok(SweepCell {
        batch,
        freq_mhz,
        tps: tokens / t,
        e2e: t,
        tbt: t / spec.gen_len as f64,
        watts,
        tpj: tokens / joules,
    })
}

pub fn run_sweep(
    spec: &SweepSpec,
    perf: &dyn PerfModel,
    power: &dyn PowerModel,
) -> Result<SweepResult> {
    spec.validate()?;
    let batches: Vec<u32> = (1..=spec.max_batch).collect();
    let freqs = spec.frequency.levels();
    let grid: Vec<(u32, u32)> = batches
        .iter()
        .flat_map(|&b| freqs.iter().map(move |&f| (b, f)))
        .collect();
    let cells = par::map(&grid, |&(b, f)| run_cell(spec, b, f, perf, power))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        spec: *spec,
        batches,
        freqs,
        cells,
    })
}
