//! Profiling datasets.
//!
//! File format: comma-separated rows, optional non-numeric header lines.
//! Five-field rows are throughput samples `tp,batch,kv_blocks,freq_mhz,ips`;
//! three-field rows are per-GPU power samples `freq_mhz,kv_blocks,watts`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PerfModel, PowerModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpsSample {
    pub tp: u32,
    pub batch: u32,
    pub kv_blocks: u32,
    pub freq_mhz: u32,
    pub ips: f64,
}

impl IpsSample {
    fn key(&self) -> (u32, u32, u32, u32) {
        (self.tp, self.batch, self.kv_blocks, self.freq_mhz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub freq_mhz: u32,
    pub kv_blocks: u32,
    pub watts: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileDataset {
    pub ips: Vec<IpsSample>,
    pub power: Vec<PowerSample>,
}

impl ProfileDataset {
    /// Rejects duplicate keys and non-positive measurements.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.ips {
            if s.tp == 0 || s.freq_mhz == 0 || !(s.ips > 0.0) || !s.ips.is_finite() {
                return Err(Error::InvalidArgument(format!("invalid ips sample {s:?}")));
            }
            if !seen.insert(s.key()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate ips sample key {:?}",
                    s.key()
                )));
            }
        }
        let mut seen = HashSet::new();
        for s in &self.power {
            if s.freq_mhz == 0 || !(s.watts >= 0.0) || !s.watts.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "invalid power sample {s:?}"
                )));
            }
            if !seen.insert((s.freq_mhz, s.kv_blocks)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate power sample key {:?}",
                    (s.freq_mhz, s.kv_blocks)
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(file);
        let mut ds = ProfileDataset::default();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            };
            if rec.iter().next().is_some_and(|f| f.parse::<f64>().is_err()) {
                // header
                continue;
            }
            let int = |i: usize| -> Result<u32> {
                rec[i]
                    .parse::<u32>()
                    .map_err(|e| err(format!("field {}: {e}", i + 1)))
            };
            let float = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| err(format!("field {}: {e}", i + 1)))
            };
            match rec.len() {
                5 => ds.ips.push(IpsSample {
                    tp: int(0)?,
                    batch: int(1)?,
                    kv_blocks: int(2)?,
                    freq_mhz: int(3)?,
                    ips: float(4)?,
                }),
                3 => ds.power.push(PowerSample {
                    freq_mhz: int(0)?,
                    kv_blocks: int(1)?,
                    watts: float(2)?,
                }),
                n => {
                    return Err(err(format!(
                        "expected 5 (ips) or 3 (power) fields, got {n}"
                    )))
                }
            }
        }
        if ds.ips.is_empty() && ds.power.is_empty() {
            return Err(Error::EmptyFile(path.to_path_buf()));
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_csv().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Rows in file format, each kind preceded by its header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if !self.ips.is_empty() {
            out.push_str("tp,batch,kv_blocks,freq_mhz,ips\n");
            for s in &self.ips {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    s.tp, s.batch, s.kv_blocks, s.freq_mhz, s.ips
                ));
            }
        }
        if !self.power.is_empty() {
            out.push_str("freq_mhz,kv_blocks,watts\n");
            for s in &self.power {
                out.push_str(&format!("{},{},{}\n", s.freq_mhz, s.kv_blocks, s.watts));
            }
        }
        out
    }

    /// Shuffles rows with `seed` and puts `train_frac` of them in the first
    /// set. Each kind of row is split independently.
    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(ProfileDataset, ProfileDataset)> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train fraction must be in (0, 1), got {train_frac}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fn cut<T: Clone>(rows: &[T], frac: f64, rng: &mut ChaCha8Rng) -> (Vec<T>, Vec<T>) {
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            idx.shuffle(rng);
            let n = (rows.len() as f64 * frac).round() as usize;
            let mut train: Vec<usize> = idx[..n].to_vec();
            let mut test: Vec<usize> = idx[n..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            (
                train.iter().map(|&i| rows[i].clone()).collect(),
                test.iter().map(|&i| rows[i].clone()).collect(),
            )
        }
        let (ips_tr, ips_te) = cut(&self.ips, train_frac, &mut rng);
        let (pw_tr, pw_te) = cut(&self.power, train_frac, &mut rng);
        Ok((
            ProfileDataset {
                ips: ips_tr,
                power: pw_tr,
            },
            ProfileDataset {
                ips: ips_te,
                power: pw_te,
            },
        ))
    }
}

/// Axes of a synthetic profiling sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub tps: Vec<u32>,
    pub batches: Vec<u32>,
    pub kv_blocks: Vec<u32>,
    pub freqs_mhz: Vec<u32>,
}

impl SweepGrid {
    /// A coarse grid covering the default profiles: batch up to 64, KV up
    /// to 1050 blocks and every fourth clock level.
    pub fn standard(tps: Vec<u32>) -> Self {
        Self {
            tps,
            batches: vec![1, 2, 4, 8, 12, 16, 24, 32, 48, 64],
            kv_blocks: (0..=14).map(|i| i * 75).collect(),
            freqs_mhz: (0..=20).map(|i| 210 + i * 60).collect(),
        }
    }
}

/// Samples `truth` over `grid` with multiplicative Gaussian noise of
/// relative standard deviation `noise`. Power rows are added when a power
/// model is supplied.
pub fn synthesize_dataset(
    truth: &dyn PerfModel,
    power: Option<&dyn PowerModel>,
    grid: &SweepGrid,
    noise: f64,
    seed: u64,
) -> Result<ProfileDataset> {
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument("noise must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut noisy = |x: f64| {
        if noise == 0.0 {
            x
        } else {
            (x * (1.0 + jitter.sample(&mut rng))).max(x * 1e-3)
        }
    };
    let mut ds = ProfileDataset::default();
    for &tp in &grid.tps {
        for &batch in &grid.batches {
            for &kv in &grid.kv_blocks {
                for &f in &grid.freqs_mhz {
                    let ips = truth.predict_ips(tp, batch, kv, f as f64);
                    if !(ips > 0.0) {
                        return Err(Error::ModelContract(format!(
                            "truth model returned {ips} at tp={tp} b={batch} kv={kv} f={f}"
                        )));
                    }
                    ds.ips.push(IpsSample {
                        tp,
                        batch,
                        kv_blocks: kv,
                        freq_mhz: f,
                        ips: noisy(ips),
                    });
                }
            }
        }
    }
    if let Some(pm) = power {
        for &kv in &grid.kv_blocks {
            for &f in &grid.freqs_mhz {
                ds.power.push(PowerSample {
                    freq_mhz: f,
                    kv_blocks: kv,
                    watts: noisy(pm.predict_power(f as f64, kv as f64)),
                });
            }
        }
    }
    Ok(ds)
}
