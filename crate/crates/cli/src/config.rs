//! Run specification: one TOML document drives every command.
//!
//! Every section is optional; see `configs/default.toml` for the full
//! document with defaults. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use ecoserve::perfmodel::{
    profile_preset, profile_preset_names, validate_profiles, EngineProfile, FittedModels, ModelSet,
    PowerParams, ReferencePower, SurrogateModel, SurrogateParams,
};
use ecoserve::sim::SimConfig;
use ecoserve::sweep::SweepSpec;
use ecoserve::trace::{self, PredictorConfig, Query, TraceSpec};
use serde::{Deserialize, Serialize};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    /// Seeds trace synthesis, length-prediction noise and dataset splits.
    /// Overrides `trace.synthetic.seed` and `sim.seed`.
    pub seed: u64,
    pub out: PathBuf,
    pub trace: TraceSource,
    pub profiles: ProfileSource,
    pub model: ModelSource,
    pub predictor: PredictorConfig,
    pub sim: SimConfig,
    pub sweep: SweepSpec,
    pub calibrate: CalibrateSpec,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            trace: TraceSource::default(),
            profiles: ProfileSource::default(),
            model: ModelSource::default(),
            predictor: PredictorConfig::default(),
            sim: SimConfig::default(),
            sweep: SweepSpec::default(),
            calibrate: CalibrateSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSource {
    /// Trace CSV (`arrival_time,prompt_len,gen_len`). When absent the
    /// synthetic spec is used.
    pub file: Option<PathBuf>,
    pub synthetic: TraceSpec,
    /// Rescale arrivals so that the peak windowed RPS equals this value.
    pub scale_peak: Option<f64>,
    pub peak_window: f64,
}

impl Default for TraceSource {
    fn default() -> Self {
        Self {
            file: None,
            synthetic: TraceSpec::default(),
            scale_peak: None,
            peak_window: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSource {
    /// Named profile set; ignored when `custom` is given.
    pub preset: String,
    pub custom: Option<Vec<EngineProfile>>,
}

impl Default for ProfileSource {
    fn default() -> Self {
        Self {
            preset: "llama2-13b".into(),
            custom: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Surrogate,
    Fitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSource {
    pub kind: ModelKind,
    /// Fitted model file written by `calibrate`; required for `fitted`.
    pub file: Option<PathBuf>,
    pub surrogate: SurrogateParams,
    /// Used whenever the fitted file carries no power table.
    pub power: PowerParams,
}

impl Default for ModelSource {
    fn default() -> Self {
        Self {
            kind: ModelKind::Surrogate,
            file: None,
            surrogate: SurrogateParams::default(),
            power: PowerParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSpec {
    /// Profiling dataset; synthesized from the surrogate when absent.
    pub dataset: Option<PathBuf>,
    /// Relative noise of synthesized throughput samples.
    pub noise: f64,
    /// Engine sizes to synthesize.
    pub tps: Vec<u32>,
    /// Training fraction of the random split.
    pub split: f64,
}

impl Default for CalibrateSpec {
    fn default() -> Self {
        Self {
            dataset: None,
            noise: 0.02,
            tps: vec![1, 2, 4],
            split: 0.9,
        }
    }
}

/// Command-line overrides; flags win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub baseline: bool,
    pub no_autoscale: bool,
    pub no_throttle: bool,
    pub scale_peak: Option<f64>,
    pub split: Option<f64>,
}

impl RunSpec {
    /// Reads a spec. Relative input paths resolve against the file's
    /// directory; `out` stays relative to the working directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut spec: RunSpec =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        rebase(&mut spec.trace.file);
        rebase(&mut spec.model.file);
        rebase(&mut spec.calibrate.dataset);
        Ok(spec)
    }

    /// Applies overrides and propagates the seed, then validates.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if o.baseline {
            self.sim.baseline_mode = true;
        }
        if o.no_autoscale {
            self.sim.autoscaling = false;
        }
        if o.no_throttle {
            self.sim.throttle = false;
        }
        if o.scale_peak.is_some() {
            self.trace.scale_peak = o.scale_peak;
        }
        if let Some(s) = o.split {
            self.calibrate.split = s;
        }
        self.trace.synthetic.seed = self.seed;
        self.sim.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.predictor.validate()?;
        self.sweep.validate()?;
        self.profiles()?;
        if !(self.trace.peak_window > 0.0) {
            bail!("trace.peak_window must be positive");
        }
        if self.trace.scale_peak.is_some_and(|r| !(r > 0.0)) {
            bail!("trace.scale_peak must be positive");
        }
        if !(self.calibrate.split > 0.0 && self.calibrate.split < 1.0) {
            bail!(
                "calibrate.split must be in (0, 1), got {}",
                self.calibrate.split
            );
        }
        if self.model.kind == ModelKind::Fitted && self.model.file.is_none() {
            bail!("model.kind = \"fitted\" needs model.file");
        }
        Ok(())
    }

    pub fn profiles(&self) -> Result<Vec<EngineProfile>> {
        let raw = match &self.profiles.custom {
            Some(p) => p.clone(),
            None => profile_preset(&self.profiles.preset).with_context(|| {
                format!(
                    "unknown profile preset `{}` (known: {})",
                    self.profiles.preset,
                    profile_preset_names().join(", ")
                )
            })?,
        };
        Ok(validate_profiles(&raw)?)
    }

    pub fn models(&self) -> Result<ModelSet> {
        let power = Arc::new(ReferencePower::new(self.model.power.clone())?);
        match self.model.kind {
            ModelKind::Surrogate => {
                let perf = SurrogateModel::new(self.model.surrogate.clone())?;
                Ok(ModelSet::exact(Arc::new(perf), power))
            }
            ModelKind::Fitted => {
                let path = self.model.file.as_ref().expect("validated");
                let fitted = FittedModels::load(path)
                    .with_context(|| format!("loading fitted model {}", path.display()))?;
                let perf = Arc::new(fitted.perf);
                Ok(match fitted.power {
                    Some(p) => ModelSet::exact(perf, Arc::new(p)),
                    None => ModelSet::exact(perf, power),
                })
            }
        }
    }

    /// The trace as loaded or synthesized, optionally rescaled.
    pub fn raw_trace(&self) -> Result<Vec<Query>> {
        let mut queries = match &self.trace.file {
            Some(p) => trace::load_trace(p, self.sim.max_tokens)
                .with_context(|| format!("loading trace {}", p.display()))?,
            None => trace::synthesize_trace(&self.trace.synthetic)?,
        };
        if let Some(peak) = self.trace.scale_peak {
            queries = trace::scale_trace(&queries, peak, self.trace.peak_window)?;
        }
        Ok(queries)
    }

    /// The simulation input: [`Self::raw_trace`] with length predictions.
    pub fn trace(&self) -> Result<Vec<Query>> {
        let mut queries = self.raw_trace()?;
        trace::apply_predictions(&mut queries, &self.predictor, self.seed);
        Ok(queries)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved spec next to the outputs.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
