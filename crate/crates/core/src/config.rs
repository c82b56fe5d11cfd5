//! Run configuration and its flat `key = value` text format.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any*
//! entry   := key ws* '=' ws* value ws* ('#' any*)?
//! key     := [a-z0-9_.]+
//! ```
//!
//! Values are taken verbatim after trimming. Keys may appear once; unknown
//! keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{Arch, FlowMode, ModelOptions};
use crate::objectives::{Objective, SubTbWeighting};
use crate::optim::AdamConfig;
use crate::targets::{self, EnergyTarget};
use crate::timegrid::Scheme;

pub const KEYS: &[&str] = &[
    "target",
    "dim",
    "objective",
    "fl_mode",
    "subtb_weighting",
    "discretization",
    "n_train",
    "c",
    "eps",
    "sigma",
    "backward",
    "langevin",
    "langevin_clip",
    "batch_size",
    "iterations",
    "drift_lr",
    "flow_lr",
    "logz_lr",
    "beta1",
    "beta2",
    "adam_eps",
    "grad_clip",
    "exploration_std",
    "exploration_decay_frac",
    "seed",
    "eval_every",
    "n_eval",
    "eval_k",
    "hidden_layers",
    "hidden_width",
    "time_embed_dim",
    "checkpoint",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Pis,
    Tb,
    VarGrad,
    Db,
    FlDb,
    SubTb,
}

impl ObjectiveKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "pis" => ObjectiveKind::Pis,
            "tb" => ObjectiveKind::Tb,
            "vargrad" => ObjectiveKind::VarGrad,
            "db" => ObjectiveKind::Db,
            "fldb" => ObjectiveKind::FlDb,
            "subtb" => ObjectiveKind::SubTb,
            other => return Err(Error::Config(format!("unknown objective `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Pis => "pis",
            ObjectiveKind::Tb => "tb",
            ObjectiveKind::VarGrad => "vargrad",
            ObjectiveKind::Db => "db",
            ObjectiveKind::FlDb => "fldb",
            ObjectiveKind::SubTb => "subtb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    Uniform,
    Random,
    Equidistant,
}

impl SchemeKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform" => SchemeKind::Uniform,
            "random" => SchemeKind::Random,
            "equidistant" => SchemeKind::Equidistant,
            other => return Err(Error::Config(format!("unknown discretization `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Uniform => "uniform",
            SchemeKind::Random => "random",
            SchemeKind::Equidistant => "equidistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub target: String,
    pub dim: Option<usize>,
    pub objective: ObjectiveKind,
    pub fl_mode: bool,
    pub subtb_weighting: SubTbWeighting,
    pub discretization: SchemeKind,
    pub n_train: usize,
    pub c: f64,
    pub eps: f64,
    /// `None` resolves to the per-target default.
    pub sigma: Option<f64>,
    pub learned_backward: bool,
    pub langevin: bool,
    pub langevin_clip: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub drift_lr: f64,
    pub flow_lr: f64,
    pub logz_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// 0 disables clipping.
    pub grad_clip: f64,
    pub exploration_std: f64,
    pub exploration_decay_frac: f64,
    pub seed: u64,
    /// Evaluate every this many iterations (and after the last); 0 evaluates only at the end.
    pub eval_every: usize,
    pub n_eval: usize,
    pub eval_k: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub time_embed_dim: usize,
    pub checkpoint: String,
}

pub const DEFAULT_ITERATIONS: usize = 25_000;
pub const DESK_ITERATIONS: usize = 5_000;

impl RunConfig {
    /// Defaults for a named target.
    pub fn new(target: &str) -> Self {
        let arch = Arch::default();
        let adam = AdamConfig::default();
        RunConfig {
            target: target.to_string(),
            dim: None,
            objective: ObjectiveKind::Tb,
            fl_mode: false,
            subtb_weighting: SubTbWeighting::Uniform,
            discretization: SchemeKind::Uniform,
            n_train: 100,
            c: 10.0,
            eps: 1e-4,
            sigma: None,
            learned_backward: false,
            langevin: false,
            langevin_clip: ModelOptions::default().langevin_clip,
            batch_size: 256,
            iterations: DEFAULT_ITERATIONS,
            drift_lr: adam.drift_lr,
            flow_lr: adam.flow_lr,
            logz_lr: adam.logz_lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            grad_clip: adam.clip.unwrap_or(0.0),
            exploration_std: 0.0,
            exploration_decay_frac: 0.5,
            seed: 0,
            eval_every: 1000,
            n_eval: 100,
            eval_k: 2000,
            hidden_layers: arch.hidden_layers,
            hidden_width: arch.hidden_width,
            time_embed_dim: arch.time_embed_dim,
            checkpoint: "checkpoint.json".to_string(),
        }
    }

    /// Parses config text. A missing `target` is an error naming the key.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let unknown: Vec<&str> = pairs.keys().map(String::as_str).filter(|k| !KEYS.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let target = pairs
            .get("target")
            .ok_or_else(|| Error::Config("missing required key `target`".into()))?;
        let mut cfg = RunConfig::new(target);
        cfg.apply(pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overwrites fields from `pairs`; keys must be known.
    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in pairs {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "target" => self.target = value.to_string(),
            "dim" => self.dim = Some(num(key, value)?),
            "objective" => self.objective = ObjectiveKind::parse(value)?,
            "fl_mode" => self.fl_mode = boolean(key, value)?,
            "subtb_weighting" => self.subtb_weighting = parse_weighting(value)?,
            "discretization" => self.discretization = SchemeKind::parse(value)?,
            "n_train" => self.n_train = num(key, value)?,
            "c" => self.c = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "sigma" => self.sigma = Some(num(key, value)?),
            "backward" => {
                self.learned_backward = match value {
                    "bridge" => false,
                    "learned" => true,
                    other => return Err(Error::Config(format!("backward must be bridge or learned, got `{other}`"))),
                }
            }
            "langevin" => self.langevin = boolean(key, value)?,
            "langevin_clip" => self.langevin_clip = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "drift_lr" => self.drift_lr = num(key, value)?,
            "flow_lr" => self.flow_lr = num(key, value)?,
            "logz_lr" => self.logz_lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "exploration_std" => self.exploration_std = num(key, value)?,
            "exploration_decay_frac" => self.exploration_decay_frac = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "n_eval" => self.n_eval = num(key, value)?,
            "eval_k" => self.eval_k = num(key, value)?,
            "hidden_layers" => self.hidden_layers = num(key, value)?,
            "hidden_width" => self.hidden_width = num(key, value)?,
            "time_embed_dim" => self.time_embed_dim = num(key, value)?,
            "checkpoint" => self.checkpoint = value.to_string(),
            other => return Err(Error::Config(format!("unknown config keys: {other}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.target.is_empty() {
            return bad("`target` must not be empty".into());
        }
        for (name, v) in [
            ("drift_lr", self.drift_lr),
            ("flow_lr", self.flow_lr),
            ("logz_lr", self.logz_lr),
            ("adam_eps", self.adam_eps),
            ("langevin_clip", self.langevin_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("`{name}` must be positive, got {v}"));
            }
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("`sigma` must be positive, got {s}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("`beta1` and `beta2` must lie in [0, 1)".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("`grad_clip` must be >= 0".into());
        }
        if !(self.exploration_std >= 0.0 && self.exploration_std.is_finite()) {
            return bad("`exploration_std` must be >= 0".into());
        }
        if !(self.exploration_decay_frac > 0.0 && self.exploration_decay_frac <= 1.0) {
            return bad("`exploration_decay_frac` must lie in (0, 1]".into());
        }
        if self.objective == ObjectiveKind::Pis && self.exploration_std > 0.0 {
            return bad("objective `pis` is on-policy; set exploration_std = 0".into());
        }
        if self.objective == ObjectiveKind::VarGrad && self.batch_size < 2 {
            return bad("objective `vargrad` needs batch_size >= 2".into());
        }
        for (name, v) in [
            ("n_train", self.n_train),
            ("batch_size", self.batch_size),
            ("n_eval", self.n_eval),
            ("eval_k", self.eval_k),
            ("hidden_layers", self.hidden_layers),
            ("hidden_width", self.hidden_width),
        ] {
            if v == 0 {
                return bad(format!("`{name}` must be at least 1"));
            }
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("`time_embed_dim` must be even and at least 2".into());
        }
        match self.discretization {
            SchemeKind::Random if !(self.c > 1.0) => return bad("`c` must exceed 1".into()),
            SchemeKind::Equidistant if self.n_train < 2 => {
                return bad("equidistant discretization needs n_train >= 2".into())
            }
            SchemeKind::Equidistant if !(self.eps > 0.0 && self.eps < 1.0 / self.n_train as f64) => {
                return bad("`eps` must lie in (0, 1/n_train)".into())
            }
            _ => {}
        }
        if self.checkpoint.is_empty() || self.checkpoint.contains('/') {
            return bad("`checkpoint` must be a plain file name".into());
        }
        targets::by_name(&self.target, self.dim).map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::Config(msg),
            other => other,
        })?;
        Ok(())
    }

    pub fn build_target(&self) -> Result<Box<dyn EnergyTarget>> {
        targets::by_name(&self.target, self.dim)
    }

    /// Default diffusion rate: wide enough for the 25-mode mixture grid, unit otherwise.
    pub fn resolved_sigma(&self) -> f64 {
        self.sigma.unwrap_or(match self.target.as_str() {
            "gmm25" | "25gmm" => 5.0,
            _ => 1.0,
        })
    }

    pub fn scheme(&self) -> Scheme {
        match self.discretization {
            SchemeKind::Uniform => Scheme::Uniform,
            SchemeKind::Random => Scheme::Random { c: self.c },
            SchemeKind::Equidistant => Scheme::Equidistant { eps: self.eps },
        }
    }

    pub fn flow_mode(&self) -> FlowMode {
        if self.fl_mode || self.objective == ObjectiveKind::FlDb {
            FlowMode::ForwardLooking
        } else {
            FlowMode::Learned
        }
    }

    pub fn objective(&self) -> Objective {
        match self.objective {
            ObjectiveKind::Pis => Objective::Pis,
            ObjectiveKind::Tb => Objective::Tb,
            ObjectiveKind::VarGrad => Objective::VarGrad,
            ObjectiveKind::Db | ObjectiveKind::FlDb => Objective::Db { flow: self.flow_mode() },
            ObjectiveKind::SubTb => Objective::SubTb { flow: self.flow_mode(), weighting: self.subtb_weighting },
        }
    }

    pub fn arch(&self) -> Arch {
        Arch {
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            time_embed_dim: self.time_embed_dim,
        }
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            langevin: self.langevin,
            learned_backward: self.learned_backward,
            langevin_clip: self.langevin_clip,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            drift_lr: self.drift_lr,
            flow_lr: self.flow_lr,
            logz_lr: self.logz_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    /// Every key with its resolved value, in [`KEYS`] order. Parsing the
    /// output yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = match *key {
                "target" => self.target.clone(),
                "dim" => match self.dim {
                    Some(d) => d.to_string(),
                    None => match self.build_target() {
                        Ok(t) => t.dim().to_string(),
                        Err(_) => continue,
                    },
                },
                "objective" => self.objective.name().into(),
                "fl_mode" => self.fl_mode.to_string(),
                "subtb_weighting" => match self.subtb_weighting {
                    SubTbWeighting::Uniform => "uniform".into(),
                    SubTbWeighting::Geometric(l) => format!("geometric:{l:?}"),
                },
                "discretization" => self.discretization.name().into(),
                "n_train" => self.n_train.to_string(),
                "c" => format!("{:?}", self.c),
                "eps" => format!("{:?}", self.eps),
                "sigma" => format!("{:?}", self.resolved_sigma()),
                "backward" => if self.learned_backward { "learned" } else { "bridge" }.into(),
                "langevin" => self.langevin.to_string(),
                "langevin_clip" => format!("{:?}", self.langevin_clip),
                "batch_size" => self.batch_size.to_string(),
                "iterations" => self.iterations.to_string(),
                "drift_lr" => format!("{:?}", self.drift_lr),
                "flow_lr" => format!("{:?}", self.flow_lr),
                "logz_lr" => format!("{:?}", self.logz_lr),
                "beta1" => format!("{:?}", self.beta1),
                "beta2" => format!("{:?}", self.beta2),
                "adam_eps" => format!("{:?}", self.adam_eps),
                "grad_clip" => format!("{:?}", self.grad_clip),
                "exploration_std" => format!("{:?}", self.exploration_std),
                "exploration_decay_frac" => format!("{:?}", self.exploration_decay_frac),
                "seed" => self.seed.to_string(),
                "eval_every" => self.eval_every.to_string(),
                "n_eval" => self.n_eval.to_string(),
                "eval_k" => self.eval_k.to_string(),
                "hidden_layers" => self.hidden_layers.to_string(),
                "hidden_width" => self.hidden_width.to_string(),
                "time_embed_dim" => self.time_embed_dim.to_string(),
                "checkpoint" => self.checkpoint.clone(),
                _ => unreachable!("every key is listed"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for key `{key}`"))),
    }
}

fn parse_weighting(value: &str) -> Result<SubTbWeighting> {
    if value == "uniform" {
        return Ok(SubTbWeighting::Uniform);
    }
    if let Some(rest) = value.strip_prefix("geometric:") {
        let lambda: f64 = num("subtb_weighting", rest)?;
        if lambda > 0.0 && lambda.is_finite() {
            return Ok(SubTbWeighting::Geometric(lambda));
        }
    }
    Err(Error::Config(format!("subtb_weighting must be `uniform` or `geometric:<lambda>`, got `{value}`")))
}

/// Splits config text into key/value pairs.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.') {
            return Err(Error::Config(format!("line {}: invalid key `{key}`", lineno + 1)));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
    }
    Ok(out)
}

/// Parses a single `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
