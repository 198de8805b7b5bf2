//! Experiment configuration: typed defaults per experiment, overridden by a
//! key=value or JSON file, then by `--set key=value`, then by dedicated flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{GaussianMixtureSpec, ImageCorpusSpec};
use crate::deep_lab::{Activation, MaeArch, RcMaeConfig, RcMaeMode};
use crate::error::{LabError, Result};
use crate::masking::MaskMode;

/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "RCMAE_LAB_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    LinearProbeSuite,
    Prop1Verify,
    BoundsCheck,
    CovarianceCheck,
    ShallowProbeSuite,
    RcmaeTrain,
    RcmaeProbeSuite,
    SVsDCompare,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::LinearProbeSuite,
        Experiment::Prop1Verify,
        Experiment::BoundsCheck,
        Experiment::CovarianceCheck,
        Experiment::ShallowProbeSuite,
        Experiment::RcmaeTrain,
        Experiment::RcmaeProbeSuite,
        Experiment::SVsDCompare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::LinearProbeSuite => "linear_probe_suite",
            Experiment::Prop1Verify => "prop1_verify",
            Experiment::BoundsCheck => "bounds_check",
            Experiment::CovarianceCheck => "covariance_check",
            Experiment::ShallowProbeSuite => "shallow_probe_suite",
            Experiment::RcmaeTrain => "rcmae_train",
            Experiment::RcmaeProbeSuite => "rcmae_probe_suite",
            Experiment::SVsDCompare => "s_vs_d_compare",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown experiment `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimMode {
    PlainSgd,
    Momentum,
}

impl OptimMode {
    pub fn uses_momentum(self) -> bool {
        self == OptimMode::Momentum
    }
}

impl std::str::FromStr for OptimMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain_sgd" => Ok(Self::PlainSgd),
            "momentum" => Ok(Self::Momentum),
            other => Err(format!("unknown mode `{other}` (expected plain_sgd|momentum)")),
        }
    }
}

/// Linear student/teacher runs. Defaults are the reference linear recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSettings {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub mask_ratio: f64,
    pub init_std: f64,
    pub mode: OptimMode,
    /// Points probed after every training iteration.
    pub probe_batch: usize,
}

impl Default for LinearSettings {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 32,
            lr: 0.001,
            momentum: 0.97,
            alpha: 0.9,
            mask_ratio: 0.5,
            init_std: 0.1,
            mode: OptimMode::Momentum,
            probe_batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSettings {
    /// Monte-Carlo samples for each of the fit and evaluation passes.
    pub samples: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CovarianceSettings {
    fn default() -> Self {
        Self {
            samples: 100_000,
            epochs: 20,
            steps_per_epoch: 500,
            batch_size: 32,
            lr: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShallowSettings {
    pub hidden: usize,
    pub activation: Activation,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub mask_ratio: f64,
    pub mode: OptimMode,
    pub probe_batch: usize,
}

impl Default for ShallowSettings {
    fn default() -> Self {
        Self {
            hidden: 64,
            activation: Activation::Tanh,
            iterations: 500,
            batch_size: 32,
            lr: 0.001,
            momentum: 0.97,
            alpha: 0.9,
            mask_ratio: 0.5,
            mode: OptimMode::Momentum,
            probe_batch: 32,
        }
    }
}

/// Deep-probe schedule: after warm-up, `rounds` probe rounds of `batch`
/// probes each, separated by `every` further training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub rounds: usize,
    pub every: usize,
    pub batch: usize,
    /// Name prefix restricting the probed parameters; empty probes all.
    pub params: String,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            rounds: 4,
            every: 50,
            batch: 16,
            params: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emit {
    pub csv: bool,
    pub json: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub emit: Emit,
    pub data: GaussianMixtureSpec,
    pub linear: LinearSettings,
    pub covariance: CovarianceSettings,
    pub shallow: ShallowSettings,
    pub corpus: ImageCorpusSpec,
    pub mae: MaeArch,
    pub rcmae: RcMaeConfig,
    /// Training steps excluded from the cosine means of `s_vs_d_compare`.
    pub burn_in: usize,
    pub probe: ProbeSettings,
}

fn err(key: &str, reason: impl Into<String>) -> LabError {
    LabError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| err(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(err(key, format!("expected a boolean, got `{other}`"))),
    }
}

/// `"0,1,2"` → seeds.
pub fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let seeds = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse::<u64>("seeds", s))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(err("seeds", "at least one seed is required"));
    }
    Ok(seeds)
}

/// `"csv,json"` → emission flags.
pub fn parse_emit(value: &str) -> Result<Emit> {
    let mut e = Emit { csv: false, json: false };
    for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part {
            "csv" => e.csv = true,
            "json" | "summary" => e.json = true,
            other => return Err(err("emit", format!("unknown target `{other}` (expected csv, json, summary)"))),
        }
    }
    Ok(e)
}

impl ExperimentConfig {
    /// Defaults for `experiment`, before any overrides.
    pub fn defaults(experiment: Experiment) -> Self {
        let out_dir = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        let mut c = Self {
            experiment,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir,
            emit: Emit { csv: true, json: true },
            data: GaussianMixtureSpec::default(),
            linear: LinearSettings::default(),
            covariance: CovarianceSettings::default(),
            shallow: ShallowSettings::default(),
            corpus: ImageCorpusSpec::default(),
            mae: MaeArch::default(),
            rcmae: RcMaeConfig::default(),
            burn_in: 0,
            probe: ProbeSettings::default(),
        };
        match experiment {
            Experiment::Prop1Verify | Experiment::BoundsCheck => c.linear.mode = OptimMode::PlainSgd,
            Experiment::RcmaeProbeSuite => {
                c.rcmae.alpha = 0.99;
                c.rcmae.lr = 0.01;
            }
            _ => {}
        }
        c
    }

    /// Applies one dotted `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        let v = value.trim();
        match k {
            "experiment" => {
                let e: Experiment = parse(k, v)?;
                if e != self.experiment {
                    return Err(err(k, format!("config is for `{}` but `{}` was requested", e.as_str(), self.experiment.as_str())));
                }
            }
            "seeds" | "seed" => self.seeds = parse_seeds(v)?,
            "out" | "out_dir" => self.out_dir = PathBuf::from(v),
            "emit" => self.emit = parse_emit(v)?,
            "burn_in" => self.burn_in = parse(k, v)?,

            "data.dim" => self.data.dim = parse(k, v)?,
            "data.n_clusters" => self.data.n_clusters = parse(k, v)?,
            "data.points_per_cluster" => self.data.points_per_cluster = parse(k, v)?,
            "data.mean_low" => self.data.mean_range.0 = parse(k, v)?,
            "data.mean_high" => self.data.mean_range.1 = parse(k, v)?,
            "data.scale_low" => self.data.wishart_scale_range.0 = parse(k, v)?,
            "data.scale_high" => self.data.wishart_scale_range.1 = parse(k, v)?,
            "data.dof" => self.data.wishart_dof = parse(k, v)?,
            "data.center" => self.data.center = parse_bool(k, v)?,

            "linear.iterations" => self.linear.iterations = parse(k, v)?,
            "linear.batch_size" => self.linear.batch_size = parse(k, v)?,
            "linear.lr" => self.linear.lr = parse(k, v)?,
            "linear.momentum" => self.linear.momentum = parse(k, v)?,
            "linear.alpha" => self.linear.alpha = parse(k, v)?,
            "linear.mask_ratio" => self.linear.mask_ratio = parse(k, v)?,
            "linear.init_std" => self.linear.init_std = parse(k, v)?,
            "linear.mode" => self.linear.mode = parse(k, v)?,
            "linear.probe_batch" => self.linear.probe_batch = parse(k, v)?,

            "covariance.samples" => self.covariance.samples = parse(k, v)?,
            "covariance.epochs" => self.covariance.epochs = parse(k, v)?,
            "covariance.steps_per_epoch" => self.covariance.steps_per_epoch = parse(k, v)?,
            "covariance.batch_size" => self.covariance.batch_size = parse(k, v)?,
            "covariance.lr" => self.covariance.lr = parse(k, v)?,

            "shallow.hidden" => self.shallow.hidden = parse(k, v)?,
            "shallow.activation" => self.shallow.activation = parse(k, v)?,
            "shallow.iterations" => self.shallow.iterations = parse(k, v)?,
            "shallow.batch_size" => self.shallow.batch_size = parse(k, v)?,
            "shallow.lr" => self.shallow.lr = parse(k, v)?,
            "shallow.momentum" => self.shallow.momentum = parse(k, v)?,
            "shallow.alpha" => self.shallow.alpha = parse(k, v)?,
            "shallow.mask_ratio" => self.shallow.mask_ratio = parse(k, v)?,
            "shallow.mode" => self.shallow.mode = parse(k, v)?,
            "shallow.probe_batch" => self.shallow.probe_batch = parse(k, v)?,

            "corpus.n_images" => self.corpus.n_images = parse(k, v)?,
            "corpus.channels" => self.corpus.channels = parse(k, v)?,
            "corpus.height" => self.corpus.height = parse(k, v)?,
            "corpus.width" => self.corpus.width = parse(k, v)?,
            "corpus.patch_size" => self.corpus.patch_size = parse(k, v)?,
            "corpus.generator" => self.corpus.generator = parse(k, v)?,

            "mae.enc_width" => self.mae.enc_width = parse(k, v)?,
            "mae.enc_depth" => self.mae.enc_depth = parse(k, v)?,
            "mae.dec_width" => self.mae.dec_width = parse(k, v)?,
            "mae.dec_depth" => self.mae.dec_depth = parse(k, v)?,
            "mae.mlp_ratio" => self.mae.mlp_ratio = parse(k, v)?,
            "mae.init_gain" => self.mae.init_gain = parse(k, v)?,

            "rcmae.mask_ratio" => self.rcmae.mask_ratio = parse(k, v)?,
            "rcmae.mode" => self.rcmae.mode = parse(k, v)?,
            "rcmae.alpha" => self.rcmae.alpha = parse(k, v)?,
            "rcmae.lr" => self.rcmae.lr = parse(k, v)?,
            "rcmae.momentum" => self.rcmae.momentum = parse(k, v)?,
            "rcmae.weight_decay" => self.rcmae.weight_decay = parse(k, v)?,
            "rcmae.batch_size" => self.rcmae.batch_size = parse(k, v)?,
            "rcmae.iterations" => self.rcmae.iterations = parse(k, v)?,
            "rcmae.consistency_weight" => self.rcmae.consistency_weight = parse(k, v)?,

            "probe.rounds" => self.probe.rounds = parse(k, v)?,
            "probe.every" => self.probe.every = parse(k, v)?,
            "probe.batch" => self.probe.batch = parse(k, v)?,
            "probe.params" => self.probe.params = v.to_string(),

            _ => return Err(err(k, "unknown key")),
        }
        Ok(())
    }

    /// Applies a `key=value` text (one per line, `#` comments) or a JSON
    /// object (nested objects flatten to dotted keys).
    pub fn apply_text(&mut self, text: &str, json: bool) -> Result<()> {
        if json {
            let value: serde_json::Value = serde_json::from_str(text)?;
            let mut pairs = Vec::new();
            flatten_json("", &value, &mut pairs)?;
            for (k, v) in pairs {
                self.set(&k, &v)?;
            }
            return Ok(());
        }
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(line, format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        self.apply_text(&text, json)
    }

    /// `--mask-mode` selects the RC-MAE variant.
    pub fn set_mask_mode(&mut self, mode: MaskMode) {
        self.rcmae.mode = match mode {
            MaskMode::Same => RcMaeMode::RcmaeS,
            MaskMode::Different => RcMaeMode::RcmaeD,
        };
    }

    /// `--mode` applies to both the linear and shallow optimisers.
    pub fn set_optim_mode(&mut self, mode: OptimMode) {
        self.linear.mode = mode;
        self.shallow.mode = mode;
    }

    /// Checks every precondition and fills derived sizes.
    pub fn validate(&mut self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(err("seeds", "at least one seed is required"));
        }
        let unit = |key: &str, v: f64, open_low: bool| -> Result<()> {
            let ok = if open_low { v > 0.0 && v < 1.0 } else { (0.0..1.0).contains(&v) };
            if ok {
                Ok(())
            } else {
                Err(err(key, format!("{v} outside {}0, 1)", if open_low { "(" } else { "[" })))
            }
        };
        let ratio = |key: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(err(key, format!("{v} outside [0, 1]")))
            }
        };
        let positive = |key: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(err(key, format!("{v} must be positive")))
            }
        };
        let nonzero = |key: &str, v: usize| -> Result<()> {
            if v > 0 {
                Ok(())
            } else {
                Err(err(key, "must be positive"))
            }
        };
        self.data.validate().map_err(|e| err("data", e.to_string()))?;

        let l = &self.linear;
        ratio("linear.mask_ratio", l.mask_ratio)?;
        unit("linear.alpha", l.alpha, true)?;
        unit("linear.momentum", l.momentum, false)?;
        positive("linear.lr", l.lr)?;
        positive("linear.init_std", l.init_std)?;
        nonzero("linear.iterations", l.iterations)?;
        nonzero("linear.batch_size", l.batch_size)?;
        nonzero("linear.probe_batch", l.probe_batch)?;
        if matches!(self.experiment, Experiment::Prop1Verify | Experiment::BoundsCheck) && l.mode != OptimMode::PlainSgd {
            return Err(err("linear.mode", "the closed-form identity and bounds need plain_sgd"));
        }

        let c = &self.covariance;
        nonzero("covariance.samples", c.samples)?;
        nonzero("covariance.epochs", c.epochs)?;
        nonzero("covariance.steps_per_epoch", c.steps_per_epoch)?;
        nonzero("covariance.batch_size", c.batch_size)?;
        positive("covariance.lr", c.lr)?;

        let s = &self.shallow;
        ratio("shallow.mask_ratio", s.mask_ratio)?;
        unit("shallow.alpha", s.alpha, true)?;
        unit("shallow.momentum", s.momentum, false)?;
        positive("shallow.lr", s.lr)?;
        nonzero("shallow.hidden", s.hidden)?;
        nonzero("shallow.iterations", s.iterations)?;
        nonzero("shallow.batch_size", s.batch_size)?;
        nonzero("shallow.probe_batch", s.probe_batch)?;

        self.corpus.validate().map_err(|e| err("corpus", e.to_string()))?;
        self.mae.n_tokens = self.corpus.n_patches();
        self.mae.patch_dim = self.corpus.patch_dim();
        self.mae.validate().map_err(|e| err("mae", e.to_string()))?;
        let r = &self.rcmae;
        unit("rcmae.mask_ratio", r.mask_ratio, true)?;
        unit("rcmae.alpha", r.alpha, true)?;
        unit("rcmae.momentum", r.momentum, false)?;
        positive("rcmae.lr", r.lr)?;
        nonzero("rcmae.batch_size", r.batch_size)?;
        if !(r.weight_decay >= 0.0) {
            return Err(err("rcmae.weight_decay", "must be non-negative"));
        }
        if !(r.consistency_weight >= 0.0) {
            return Err(err("rcmae.consistency_weight", "must be non-negative"));
        }
        r.validate().map_err(|e| err("rcmae", e.to_string()))?;
        nonzero("probe.batch", self.probe.batch)?;
        if self.experiment == Experiment::SVsDCompare && self.burn_in >= self.rcmae.iterations {
            return Err(err("burn_in", "must be smaller than rcmae.iterations"));
        }
        Ok(())
    }
}

fn flatten_json(prefix: &str, value: &serde_json::Value, out: &mut Vec<(String, String)>) -> Result<()> {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, v, out)?;
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            out.push((prefix.to_string(), parts.join(",")));
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Null => return Err(err(prefix, "null is not a value")),
        other => out.push((prefix.to_string(), other.to_string())),
    }
    Ok(())
}
