//! Stepwise energy integration over constant-power segments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constant power draw of one engine over `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSegment {
    pub engine: usize,
    pub tp: u32,
    pub start: f64,
    pub end: f64,
    pub watts: f64,
    /// Drawn by an engine that receives no new requests.
    pub shadow: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTotals {
    pub total_j: f64,
    pub shadow_j: f64,
    /// Joules per engine index.
    pub per_engine_j: BTreeMap<usize, f64>,
}

/// `sum(watts * (end - start))`. Segments must be sorted by start time.
pub fn integrate_energy(series: &[PowerSegment]) -> Result<EnergyTotals> {
    let mut out = EnergyTotals::default();
    let mut prev = f64::NEG_INFINITY;
    for s in series {
        if s.start < prev {
            return Err(Error::InvalidArgument(format!(
                "power series not sorted: segment at {} after {prev}",
                s.start
            )));
        }
        if !(s.end >= s.start) {
            return Err(Error::InvalidArgument(format!(
                "segment ends before it starts: {s:?}"
            )));
        }
        prev = s.start;
        let j = s.watts * (s.end - s.start);
        out.total_j += j;
        if s.shadow {
            out.shadow_j += j;
        }
        *out.per_engine_j.entry(s.engine).or_default() += j;
    }
    Ok(out)
}
