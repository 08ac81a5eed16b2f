//! Workload traces: loading, synthesis, right-scaling and generation-length
//! prediction.
//!
//! Trace files are comma-separated rows of
//! `arrival_ms,prompt_tokens,output_tokens` with an optional header line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Two-sided standard normal quantile for a 95% interval.
pub const Z95: f64 = 1.959_963_984_540_054;

/// One inference request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    /// Seconds since trace start.
    pub arrival_time: f64,
    pub prompt_len: u32,
    pub true_gen_len: u32,
    /// Filled by [`predict_length`]; equals `true_gen_len` until then.
    pub predicted_gen_len: u32,
}

impl Query {
    pub fn new(id: u64, arrival_time: f64, prompt_len: u32, true_gen_len: u32) -> Self {
        Self {
            id,
            arrival_time,
            prompt_len,
            true_gen_len,
            predicted_gen_len: true_gen_len,
        }
    }
}

/// Log-normal length distribution truncated (by clamping) to `[1, max_tokens]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthDist {
    pub median: f64,
    pub sigma: f64,
}

impl LengthDist {
    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.median >= 1.0) || !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{what}: median must be >= 1 and sigma >= 0 (got {self:?})"
            )));
        }
        Ok(())
    }

    fn sampler(&self) -> LogNormal<f64> {
        LogNormal::new(self.median.ln(), self.sigma).expect("validated log-normal parameters")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Each point's rate holds until the next point.
    Step,
    /// Rates are linearly interpolated between points.
    Linear,
}

/// An RPS-over-time curve. Before the first point the first rate applies,
/// after the last point the last rate applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpsProfile {
    /// `(time_s, rps)` pairs sorted by time.
    pub points: Vec<(f64, f64)>,
    pub interpolation: Interpolation,
}

impl RpsProfile {
    pub fn constant(rps: f64) -> Self {
        Self {
            points: vec![(0.0, rps)],
            interpolation: Interpolation::Step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidArgument("rps profile has no points".into()));
        }
        if self
            .points
            .iter()
            .any(|&(_, r)| !(r > 0.0) || !r.is_finite())
        {
            return Err(Error::InvalidArgument("rps values must be > 0".into()));
        }
        if self.points.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::InvalidArgument(
                "rps profile times must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        let pts = &self.points;
        let idx = pts.partition_point(|&(pt, _)| pt <= t);
        if idx == 0 {
            return pts[0].1;
        }
        if idx == pts.len() {
            return pts[idx - 1].1;
        }
        let (t0, r0) = pts[idx - 1];
        match self.interpolation {
            Interpolation::Step => r0,
            Interpolation::Linear => {
                let (t1, r1) = pts[idx];
                r0 + (r1 - r0) * (t - t0) / (t1 - t0)
            }
        }
    }

    pub fn max_rate(&self) -> f64 {
        self.points.iter().map(|&(_, r)| r).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSpec {
    pub duration: f64,
    pub rps_profile: RpsProfile,
    pub prompt_dist: LengthDist,
    pub gen_dist: LengthDist,
    pub max_tokens: u32,
    pub seed: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            duration: 600.0,
            rps_profile: RpsProfile::constant(2.0),
            prompt_dist: LengthDist {
                median: 300.0,
                sigma: 0.8,
            },
            gen_dist: LengthDist {
                median: 180.0,
                sigma: 0.6,
            },
            max_tokens: 4096,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    Oracle,
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub mode: PredictorMode,
    /// 95th percentile of the absolute relative prediction error.
    pub p95_error: f64,
    /// Multiplicative safety margin; `None` means "use `p95_error`".
    pub conservative_factor: Option<f64>,
    pub max_tokens: u32,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self::oracle(4096)
    }
}

impl PredictorConfig {
    pub fn oracle(max_tokens: u32) -> Self {
        Self {
            mode: PredictorMode::Oracle,
            p95_error: 0.0,
            conservative_factor: Some(0.0),
            max_tokens,
        }
    }

    pub fn noisy(p95_error: f64, max_tokens: u32) -> Self {
        Self {
            mode: PredictorMode::Noisy,
            p95_error,
            conservative_factor: None,
            max_tokens,
        }
    }

    pub fn factor(&self) -> f64 {
        self.conservative_factor.unwrap_or(self.p95_error)
    }

    /// Relative standard deviation such that `P(|eps| <= p95_error) = 0.95`.
    pub fn sigma(&self) -> f64 {
        self.p95_error / Z95
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p95_error >= 0.0) || !(self.factor() >= 0.0) || self.max_tokens == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid predictor config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Loads a trace file, clamping lengths to `[1, max_tokens]`.
pub fn load_trace(path: impl AsRef<Path>, max_tokens: u32) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);

    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(idx as u64 + 1, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 3 {
            return Err(parse_err(
                line,
                format!(
                    "expected 3 fields (arrival_ms,prompt_tokens,output_tokens), got {}",
                    rec.len()
                ),
            ));
        }
        let fields: Result<Vec<u64>, _> = rec.iter().map(str::parse::<u64>).collect();
        let fields = match fields {
            Ok(f) => f,
            // a non-numeric first row is a header
            Err(_) if rows.is_empty() && idx == 0 => continue,
            Err(e) => return Err(parse_err(line, format!("{e} in {:?}", rec.as_slice()))),
        };
        let clamp = |v: u64, name: &str| -> u32 {
            let c = v.clamp(1, max_tokens as u64) as u32;
            if c as u64 != v {
                warn!("{}:{line}: {name} {v} clamped to {c}", path.display());
            }
            c
        };
        let prompt = clamp(fields[1], "prompt_tokens");
        let output = clamp(fields[2], "output_tokens");
        rows.push((fields[0], prompt, output));
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    rows.sort_by_key(|r| r.0);
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(i, (ms, p, o))| Query::new(i as u64, ms as f64 / 1000.0, p, o))
        .collect())
}

/// Writes queries in the trace file format (with header). Arrival times are
/// rounded to whole milliseconds.
pub fn write_trace(path: impl AsRef<Path>, queries: &[Query]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = String::from("arrival_ms,prompt_tokens,output_tokens\n");
    for q in queries {
        body.push_str(&format!(
            "{},{},{}\n",
            (q.arrival_time * 1000.0).round() as u64,
            q.prompt_len,
            q.true_gen_len
        ));
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Non-homogeneous Poisson arrivals (by thinning) with i.i.d. log-normal
/// prompt and generation lengths.
pub fn synthesize_trace(spec: &TraceSpec) -> Result<Vec<Query>> {
    if !(spec.duration > 0.0) || !spec.duration.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "trace duration must be positive, got {}",
            spec.duration
        )));
    }
    if spec.max_tokens == 0 {
        return Err(Error::InvalidArgument("max_tokens must be >= 1".into()));
    }
    spec.rps_profile.validate()?;
    spec.prompt_dist.validate("prompt_dist")?;
    spec.gen_dist.validate("gen_dist")?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lambda_max = spec.rps_profile.max_rate();
    let gap = Exp::new(lambda_max).expect("positive rate");
    let prompt = spec.prompt_dist.sampler();
    let gen = spec.gen_dist.sampler();
    let clamp = |x: f64| x.round().clamp(1.0, spec.max_tokens as f64) as u32;

    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += gap.sample(&mut rng);
        if t >= spec.duration {
            break;
        }
        let accept: f64 = rng.random();
        if accept * lambda_max >= spec.rps_profile.rate_at(t) {
            continue;
        }
        let p = clamp(prompt.sample(&mut rng));
        let g = clamp(gen.sample(&mut rng));
        out.push(Query::new(out.len() as u64, t, p, g));
    }
    Ok(out)
}

/// Highest arrival count in any window `[a_i, a_i + window)` opened at an
/// arrival, divided by the window. `queries` must be sorted by arrival.
pub fn peak_rps(queries: &[Query], window: f64) -> f64 {
    assert!(window > 0.0, "window must be positive");
    let mut best = 0;
    let mut end = 0;
    for (i, q) in queries.iter().enumerate() {
        end = end.max(i);
        while end < queries.len() && queries[end].arrival_time < q.arrival_time + window {
            end += 1;
        }
        best = best.max(end - i);
    }
    best as f64 / window
}

/// Stretches (or compresses) the time axis so that [`peak_rps`] becomes
/// `target_peak_rps`, rounded down to a whole number of arrivals per
/// window.
///
/// With `k` arrivals allowed per window, the peak stays at or below `k`
/// exactly when every `k + 1` consecutive arrivals span at least `window`,
/// so the tightest such span fixes the factor.
pub fn scale_trace(queries: &[Query], target_peak_rps: f64, window: f64) -> Result<Vec<Query>> {
    if !(target_peak_rps > 0.0 && window > 0.0) {
        return Err(Error::InvalidArgument(
            "target peak rps and window must be positive".into(),
        ));
    }
    let k = (target_peak_rps * window + 1e-9).floor() as usize;
    if k == 0 {
        return Err(Error::InvalidArgument(format!(
            "peak {target_peak_rps} RPS is below one arrival per {window} s window"
        )));
    }
    if queries.len() <= k {
        return Err(Error::InvalidArgument(format!(
            "{} arrivals cannot reach {k} per window",
            queries.len()
        )));
    }
    let span = queries
        .windows(k + 1)
        .map(|w| w[k].arrival_time - w[0].arrival_time)
        .fold(f64::INFINITY, f64::min);
    if !(span > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "more than {k} arrivals share one timestamp"
        )));
    }
    let mut factor = window / span;
    // rounding in `t * factor` can pull the (k+1)-th arrival back inside;
    // test it the way `peak_rps` does
    let tight = |f: f64| {
        queries
            .windows(k + 1)
            .all(|w| w[k].arrival_time * f >= w[0].arrival_time * f + window)
    };
    while !tight(factor) {
        factor = factor.next_up();
    }
    Ok(queries
        .iter()
        .map(|q| Query {
            arrival_time: q.arrival_time * factor,
            ..*q
        })
        .collect())
}

/// Predicted generation length for `q`, including the conservative margin.
pub fn predict_length<R: Rng + ?Sized>(q: &Query, cfg: &PredictorConfig, rng: &mut R) -> u32 {
    let max = cfg.max_tokens as f64;
    let base = match cfg.mode {
        PredictorMode::Oracle => q.true_gen_len as f64,
        PredictorMode::Noisy => {
            let sigma = cfg.sigma();
            let eps = if sigma > 0.0 {
                Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
            } else {
                0.0
            };
            (q.true_gen_len as f64 * (1.0 + eps))
                .round()
                .clamp(1.0, max)
        }
    };
    (base * (1.0 + cfg.factor())).ceil().clamp(1.0, max) as u32
}

/// Fills `predicted_gen_len` for every query from a seeded stream.
pub fn apply_predictions(queries: &mut [Query], cfg: &PredictorConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for q in queries.iter_mut() {
        q.predicted_gen_len = predict_length(q, cfg, &mut rng);
    }
}

/// Stable content hash of a trace (arrivals and lengths).
pub fn fingerprint(queries: &[Query]) -> String {
    let mut h = Sha256::new();
    for q in queries {
        h.update(q.arrival_time.to_bits().to_le_bytes());
        h.update(q.prompt_len.to_le_bytes());
        h.update(q.true_gen_len.to_le_bytes());
    }
    h.finalize()
        .iter()
        .take(16)
        .map(|b| format!("{b:02x}"))
        .collect()
}
