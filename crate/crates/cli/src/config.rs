//! JSON run configuration.
//!
//! The document has five top-level sections. Every `model` key is required;
//! `grid` and `control` keys fall back to defaults; `mc` and `outputs` keys
//! are required. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use bonus_malus::{
    BarrierMode, ClaimLaw, Control, FixedBarrier, Grid64, GridSpec64, Params, PremiumSpec, StopRule, UtilitySpec,
    Warning,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const SEED_ENV: &str = "BONUS_MALUS_MC_SEED";
pub const PATHS_ENV: &str = "BONUS_MALUS_MC_N_PATHS";

const MODEL_KEYS: &[&str] = &["T", "S", "lambda", "mu", "m1", "m2", "pi1", "pi2", "c", "gamma", "floor"];
const GRID_KEYS: &[&str] = &["h_t", "h_x", "x_lo", "x_hi", "y_max", "tail_eps", "h_y", "pad_below", "pad_above"];
const CONTROL_KEYS: &[&str] = &["mode", "barrier", "stop", "tol", "iterations", "max_iterations", "paper_mode"];
const MC_KEYS: &[&str] = &["n_paths", "seed"];
const OUTPUT_KEYS: &[&str] = &["dir", "artifacts"];

/// Premium rate: a number for a constant rate, or an affine function of the clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PremiumConfig {
    Constant(f64),
    Affine { intercept: f64, slope: f64 },
}

impl From<PremiumConfig> for PremiumSpec<f64> {
    fn from(p: PremiumConfig) -> Self {
        match p {
            PremiumConfig::Constant(rate) => PremiumSpec::Constant { rate },
            PremiumConfig::Affine { intercept, slope } => PremiumSpec::Affine { intercept, slope },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "S")]
    pub reset_time: f64,
    pub lambda: f64,
    /// Mean claim size of the exponential law.
    pub mu: f64,
    pub m1: f64,
    pub m2: f64,
    pub pi1: PremiumConfig,
    pub pi2: PremiumConfig,
    pub c: f64,
    pub gamma: f64,
    pub floor: f64,
}

impl ModelConfig {
    pub fn table1() -> Self {
        ModelConfig {
            horizon: 5.0,
            reset_time: 2.0,
            lambda: 1.0,
            mu: 1.0,
            m1: 0.0,
            m2: 0.0,
            pi1: PremiumConfig::Affine {
                intercept: 1.0,
                slope: -0.14,
            },
            pi2: PremiumConfig::Constant(1.1),
            c: 1.2,
            gamma: 0.5,
            floor: -1e10,
        }
    }

    pub fn params(&self) -> Params {
        Params {
            horizon: self.horizon,
            reset_time: self.reset_time,
            intensity: self.lambda,
            claim_law: ClaimLaw::exponential(self.mu),
            deductibles: [self.m1, self.m2],
            premiums: [self.pi1.into(), self.pi2.into()],
            income: self.c,
            utility: UtilitySpec::capped_exponential(self.gamma, self.floor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub h_t: f64,
    pub h_x: f64,
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_max: Option<f64>,
    pub tail_eps: f64,
    pub h_y: Option<f64>,
    pub pad_below: Option<f64>,
    pub pad_above: Option<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        let d = GridSpec64::default();
        GridConfig {
            h_t: d.h_t,
            h_x: d.h_x,
            x_lo: d.x_lo,
            x_hi: d.x_hi,
            y_max: d.y_max,
            tail_eps: d.tail_eps,
            h_y: d.h_y,
            pad_below: d.pad_below,
            pad_above: d.pad_above,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> GridSpec64 {
        GridSpec64 {
            h_t: self.h_t,
            h_x: self.h_x,
            x_lo: self.x_lo,
            x_hi: self.x_hi,
            y_max: self.y_max,
            tail_eps: self.tail_eps,
            h_y: self.h_y,
            pad_below: self.pad_below,
            pad_above: self.pad_above,
        }
    }
}

/// A barrier level; `"inf"` in JSON for never reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Barrier(pub f64);

impl Serialize for Barrier {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_infinite() && self.0 > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Barrier {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Barrier(v)),
            Raw::Str(s) if s == "inf" => Ok(Barrier(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got \"{s}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeConfig {
    Optimize,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopConfig {
    Tolerance,
    Iterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub mode: ModeConfig,
    /// Constant barrier for `mode = "fixed"`.
    pub barrier: Option<Barrier>,
    pub stop: StopConfig,
    pub tol: f64,
    pub iterations: usize,
    pub max_iterations: usize,
    pub paper_mode: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            mode: ModeConfig::Optimize,
            barrier: None,
            stop: StopConfig::Tolerance,
            tol: bonus_malus::DEFAULT_TOLERANCE,
            iterations: bonus_malus::PAPER_ITERATIONS,
            max_iterations: bonus_malus::DEFAULT_MAX_ITERATIONS,
            paper_mode: false,
        }
    }
}

impl ControlConfig {
    pub fn control(&self) -> Result<Control, CliError> {
        let mode = match (self.mode, self.barrier) {
            (ModeConfig::Optimize, None) => BarrierMode::Optimize,
            (ModeConfig::Optimize, Some(_)) => {
                return Err(CliError::Config("control.barrier is only allowed with control.mode = \"fixed\"".into()))
            }
            (ModeConfig::Fixed, Some(b)) => BarrierMode::Fixed(FixedBarrier::Constant(b.0)),
            (ModeConfig::Fixed, None) => {
                return Err(CliError::Config("control.mode = \"fixed\" requires control.barrier".into()))
            }
        };
        let stop = match self.stop {
            StopConfig::Tolerance => StopRule::SupChangeBelow(self.tol),
            StopConfig::Iterations => StopRule::FixedIterations(self.iterations),
        };
        Ok(Control {
            mode,
            stop,
            paper_mode: self.paper_mode,
            max_iterations: self.max_iterations,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    Figures,
    ValueField,
    BarrierField,
    CheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Relative paths are resolved against the config file's directory.
    pub dir: PathBuf,
    pub artifacts: Vec<Artifact>,
}

/// A parsed and validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub control: ControlConfig,
    pub mc: McConfig,
    pub outputs: OutputConfig,
}

impl RunSpec {
    pub fn params(&self) -> Params {
        self.model.params()
    }

    pub fn build_grid(&self) -> Result<Arc<Grid64>, CliError> {
        Ok(Arc::new(Grid64::build(&self.params(), &self.grid.spec())?))
    }

    pub fn control(&self) -> Result<Control, CliError> {
        self.control.control()
    }

    /// Check every invariant that can be checked without solving; returns
    /// the soft warnings of the model.
    pub fn validate(&self) -> Result<Vec<Warning>, CliError> {
        let warnings = self.params().validate()?;
        self.control()?;
        self.build_grid()?;
        if self.mc.n_paths < 2 {
            return Err(CliError::Config(format!("mc.n_paths must be >= 2, got {}", self.mc.n_paths)));
        }
        Ok(warnings)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run spec serializes")
    }

    /// Apply the `mc` environment overrides.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), CliError> {
        if let Some(v) = lookup(SEED_ENV) {
            self.mc.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got \"{v}\"")))?;
        }
        if let Some(v) = lookup(PATHS_ENV) {
            self.mc.n_paths = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{PATHS_ENV} must be an unsigned integer, got \"{v}\"")))?;
        }
        Ok(())
    }
}

fn check_keys(section: &str, obj: &Map<String, Value>, allowed: &[&str], required: bool) -> Result<(), CliError> {
    if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(CliError::Config(format!("unknown key {section}.{k}")));
    }
    if required {
        if let Some(k) = allowed.iter().find(|k| !obj.contains_key(**k)) {
            return Err(CliError::Config(format!("missing required key {section}.{k}")));
        }
    }
    Ok(())
}

/// Parse a configuration document without validating the model or grid.
pub fn parse_config(text: &str) -> Result<RunSpec, CliError> {
    let root: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("malformed JSON: {e}")))?;
    let top = root
        .as_object()
        .ok_or_else(|| CliError::Config("configuration must be a JSON object".into()))?;
    if let Some(k) = top.keys().find(|k| !["model", "grid", "control", "mc", "outputs"].contains(&k.as_str())) {
        return Err(CliError::Config(format!("unknown key {k}")));
    }
    let sections: [(&str, &[&str], bool); 5] = [
        ("model", MODEL_KEYS, true),
        ("grid", GRID_KEYS, false),
        ("control", CONTROL_KEYS, false),
        ("mc", MC_KEYS, true),
        ("outputs", OUTPUT_KEYS, true),
    ];
    for (name, keys, required) in sections {
        match top.get(name) {
            Some(Value::Object(obj)) => check_keys(name, obj, keys, required)?,
            Some(_) => return Err(CliError::Config(format!("{name} must be a JSON object"))),
            None if required => return Err(CliError::Config(format!("missing required key {name}"))),
            None => {}
        }
    }
    serde_path_to_error::deserialize(&root).map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))
}

/// Read and parse a configuration file, resolving a relative output
/// directory against the file's directory. Not yet validated.
pub fn read_config(path: &Path) -> Result<RunSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut spec = parse_config(&text)?;
    if spec.outputs.dir.is_relative() {
        if let Some(parent) = path.parent() {
            spec.outputs.dir = parent.join(&spec.outputs.dir);
        }
    }
    Ok(spec)
}

/// Read a configuration file, apply the environment overrides and validate.
pub fn load_config(path: &Path, env: impl Fn(&str) -> Option<String>) -> Result<RunSpec, CliError> {
    let mut spec = read_config(path)?;
    spec.apply_env(env)?;
    spec.validate()?;
    Ok(spec)
}
