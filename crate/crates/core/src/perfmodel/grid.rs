//! Table-driven models: piecewise-multilinear interpolation on a
//! rectilinear grid, clamped to the nearest hull value outside the profiled
//! range.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::dataset::{IpsSample, PowerSample, ProfileDataset};
use super::{PerfModel, PowerModel};
use crate::error::{Error, Result};

/// First line of a serialized model file.
pub const MODEL_FILE_HEADER: &str = "# ecoserve grid model v1";

/// Dense values over the cartesian product of sorted axes, row-major with
/// the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTable {
    axes: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl GridTable {
    /// Builds a table from scattered samples lying on grid nodes. Nodes
    /// without a sample are filled from their neighbours: first by linear
    /// interpolation between the nearest known nodes along an axis, then by
    /// copying the nearest known node.
    pub fn fit(points: &[(Vec<f64>, f64)], names: &[&'static str], tp: u32) -> Result<Self> {
        let dims = names.len();
        let mut axes: Vec<Vec<f64>> = vec![Vec::new(); dims];
        for (x, _) in points {
            debug_assert_eq!(x.len(), dims);
            for (axis, &v) in axes.iter_mut().zip(x) {
                axis.push(v);
            }
        }
        for (axis, name) in axes.iter_mut().zip(names) {
            axis.sort_by(f64::total_cmp);
            axis.dedup();
            if axis.len() < 2 {
                return Err(Error::DegenerateAxis { axis: name, tp });
            }
        }
        let len: usize = axes.iter().map(Vec::len).product();
        let mut table = GridTable {
            axes,
            values: vec![f64::NAN; len],
        };
        for (x, y) in points {
            let idx: Vec<usize> = x
                .iter()
                .zip(&table.axes)
                .map(|(v, a)| {
                    a.binary_search_by(|p| p.total_cmp(v))
                        .expect("value on axis")
                })
                .collect();
            let flat = table.flat(&idx);
            table.values[flat] = *y;
        }
        table.fill_missing();
        Ok(table)
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.axes.len()];
        for d in (0..self.axes.len().saturating_sub(1)).rev() {
            s[d] = s[d + 1] * self.axes[d + 1].len();
        }
        s
    }

    fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    fn unflat(&self, mut flat: usize) -> Vec<usize> {
        let strides = self.strides();
        strides
            .iter()
            .map(|s| {
                let i = flat / s;
                flat %= s;
                i
            })
            .collect()
    }

    fn fill_missing(&mut self) {
        let strides = self.strides();
        // search order: last axis (frequency) first
        let order: Vec<usize> = (0..self.axes.len()).rev().collect();
        loop {
            let missing: Vec<usize> = (0..self.values.len())
                .filter(|&i| self.values[i].is_nan())
                .collect();
            if missing.is_empty() {
                return;
            }
            let snapshot = self.values.clone();
            let mut progressed = false;
            for two_sided in [true, false] {
                for &cell in &missing {
                    let idx = self.unflat(cell);
                    for &d in &order {
                        let n = self.axes[d].len();
                        let at = |i: usize| snapshot[cell - idx[d] * strides[d] + i * strides[d]];
                        let below = (0..idx[d]).rev().find(|&i| !at(i).is_nan());
                        let above = (idx[d] + 1..n).find(|&i| !at(i).is_nan());
                        let v = match (below, above) {
                            (Some(lo), Some(hi)) => {
                                let a = &self.axes[d];
                                let w = (a[idx[d]] - a[lo]) / (a[hi] - a[lo]);
                                (1.0 - w) * at(lo) + w * at(hi)
                            }
                            (Some(i), None) | (None, Some(i)) if !two_sided => {
                                // extrapolate linearly from the two nearest known
                                // nodes on that side, falling back to a copy
                                let next = if i < idx[d] {
                                    (0..i).rev().find(|&j| !at(j).is_nan())
                                } else {
                                    (i + 1..n).find(|&j| !at(j).is_nan())
                                };
                                let a = &self.axes[d];
                                let lin = next.map(|j| {
                                    at(i) + (at(i) - at(j)) * (a[idx[d]] - a[i]) / (a[i] - a[j])
                                });
                                match lin {
                                    Some(v) if v > 0.0 => v,
                                    _ => at(i),
                                }
                            }
                            _ => continue,
                        };
                        self.values[cell] = v;
                        progressed = true;
                        break;
                    }
                }
                if progressed {
                    break;
                }
            }
            assert!(progressed, "grid fill stalled with known values present");
        }
    }

    fn bracket(axis: &[f64], x: f64) -> (usize, usize, f64) {
        let last = axis.len() - 1;
        if !(x > axis[0]) {
            return (0, 0, 0.0);
        }
        if x >= axis[last] {
            return (last, last, 0.0);
        }
        let hi = axis.partition_point(|&v| v <= x);
        let lo = hi - 1;
        (lo, hi, (x - axis[lo]) / (axis[hi] - axis[lo]))
    }

    pub fn interp(&self, x: &[f64]) -> f64 {
        let dims = self.axes.len();
        let brackets: Vec<_> = self
            .axes
            .iter()
            .zip(x)
            .map(|(a, &v)| Self::bracket(a, v))
            .collect();
        let strides = self.strides();
        let mut acc = 0.0;
        for corner in 0..(1usize << dims) {
            let mut weight = 1.0;
            let mut flat = 0;
            for (d, &(lo, hi, w)) in brackets.iter().enumerate() {
                let upper = corner >> (dims - 1 - d) & 1 == 1;
                if upper {
                    weight *= w;
                    flat += hi * strides[d];
                } else {
                    weight *= 1.0 - w;
                    flat += lo * strides[d];
                }
            }
            if weight != 0.0 {
                acc += weight * self.values[flat];
            }
        }
        acc
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    /// `(node coordinates, value)` for every grid node.
    pub fn nodes(&self) -> impl Iterator<Item = (Vec<f64>, f64)> + '_ {
        (0..self.values.len()).map(move |i| {
            let idx = self.unflat(i);
            let x = idx
                .iter()
                .enumerate()
                .map(|(d, &k)| self.axes[d][k])
                .collect();
            (x, self.values[i])
        })
    }

    /// True when values never decrease along the last axis.
    fn monotone_in_last_axis(&self) -> bool {
        let n = self.axes.last().map_or(1, Vec::len);
        self.values
            .chunks(n)
            .all(|row| row.windows(2).all(|w| w[0] <= w[1]))
    }
}

/// Interpolated throughput table over `(batch, kv, freq)`, one per TP level.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    tables: BTreeMap<u32, GridTable>,
    monotone: bool,
}

impl GridModel {
    pub fn fit(ds: &ProfileDataset) -> Result<Self> {
        ds.validate()?;
        if ds.ips.is_empty() {
            return Err(Error::InvalidArgument(
                "dataset has no throughput rows".into(),
            ));
        }
        let mut by_tp: BTreeMap<u32, Vec<(Vec<f64>, f64)>> = BTreeMap::new();
        for s in &ds.ips {
            by_tp.entry(s.tp).or_default().push((
                vec![s.batch as f64, s.kv_blocks as f64, s.freq_mhz as f64],
                s.ips,
            ));
        }
        let mut tables = BTreeMap::new();
        for (tp, pts) in by_tp {
            tables.insert(
                tp,
                GridTable::fit(&pts, &["batch", "kv_blocks", "freq_mhz"], tp)?,
            );
        }
        let monotone = tables.values().all(GridTable::monotone_in_last_axis);
        Ok(Self { tables, monotone })
    }

    pub fn tps(&self) -> Vec<u32> {
        self.tables.keys().copied().collect()
    }

    pub fn table(&self, tp: u32) -> Option<&GridTable> {
        self.tables.get(&tp)
    }

    /// Every grid node as a dataset row.
    pub fn to_dataset(&self) -> ProfileDataset {
        let mut ds = ProfileDataset::default();
        for (&tp, t) in &self.tables {
            for (x, ips) in t.nodes() {
                ds.ips.push(IpsSample {
                    tp,
                    batch: x[0] as u32,
                    kv_blocks: x[1] as u32,
                    freq_mhz: x[2] as u32,
                    ips,
                });
            }
        }
        ds
    }
}

impl PerfModel for GridModel {
    fn predict_ips(&self, tp: u32, batch: u32, kv_blocks: u32, freq_mhz: f64) -> f64 {
        match self.tables.get(&tp) {
            Some(t) => t.interp(&[batch as f64, kv_blocks as f64, freq_mhz]),
            None => f64::NAN,
        }
    }

    fn monotone_in_freq(&self) -> bool {
        self.monotone
    }
}

/// Interpolated per-GPU power table over `(freq, kv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPower {
    table: GridTable,
    idle: f64,
}

impl GridPower {
    pub fn fit(samples: &[PowerSample]) -> Result<Self> {
        let pts: Vec<_> = samples
            .iter()
            .map(|s| (vec![s.freq_mhz as f64, s.kv_blocks as f64], s.watts))
            .collect();
        if pts.is_empty() {
            return Err(Error::InvalidArgument("dataset has no power rows".into()));
        }
        let table = GridTable::fit(&pts, &["freq_mhz", "kv_blocks"], 0)?;
        let idle = table.values.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self { table, idle })
    }

    fn to_samples(&self) -> Vec<PowerSample> {
        self.table
            .nodes()
            .map(|(x, w)| PowerSample {
                freq_mhz: x[0] as u32,
                kv_blocks: x[1] as u32,
                watts: w,
            })
            .collect()
    }
}

impl PowerModel for GridPower {
    fn predict_power(&self, freq_mhz: f64, kv_blocks: f64) -> f64 {
        self.table.interp(&[freq_mhz, kv_blocks])
    }

    fn idle_power(&self) -> f64 {
        self.idle
    }
}

/// A fitted throughput table and, if profiled, a power table.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModels {
    pub perf: GridModel,
    pub power: Option<GridPower>,
}

impl FittedModels {
    pub fn fit(ds: &ProfileDataset) -> Result<Self> {
        let perf = GridModel::fit(ds)?;
        let power = if ds.power.is_empty() {
            None
        } else {
            Some(GridPower::fit(&ds.power)?)
        };
        Ok(Self { perf, power })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut ds = self.perf.to_dataset();
        if let Some(p) = &self.power {
            ds.power = p.to_samples();
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{MODEL_FILE_HEADER}")
            .and_then(|_| f.write_all(ds.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let first = text.lines().next().unwrap_or_default().trim();
        if first != MODEL_FILE_HEADER {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("expected format header `{MODEL_FILE_HEADER}`, found `{first}`"),
            });
        }
        Self::fit(&ProfileDataset::load(path)?)
    }
}
