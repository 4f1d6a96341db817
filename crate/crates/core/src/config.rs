//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backend::BackendConfig;
use crate::controller::{BlendMode, EditOptions, GatingPolicy};
use crate::error::{Result, SpecRefError};
use crate::schedule::{build_schedule, NoiseSchedule};

const REQUIRED: &[&str] = &[
    "seed",
    "train_steps",
    "sample_steps",
    "beta_min",
    "beta_max",
    "gate_t_start",
    "gate_t_end",
    "gate_l_start",
    "gate_l_end",
    "mt_threshold",
    "blend_threshold",
    "mt_soft",
    "p2p_inject",
];

const OPTIONAL: &[&str] = &["dump_dir", "gate_enabled", "blend_mode", "backend"];

/// Which noise predictor the CLI drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Toy,
    /// Toy network with its noise estimate replaced by zeros.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train_steps: usize,
    pub sample_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub gate_t_start: usize,
    pub gate_t_end: usize,
    pub gate_l_start: usize,
    pub gate_l_end: usize,
    pub gate_enabled: bool,
    pub mt_threshold: f32,
    pub blend_threshold: f32,
    pub mt_soft: bool,
    pub p2p_inject: bool,
    pub blend_mode: BlendMode,
    pub backend: BackendKind,
    pub dump_dir: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> SpecRefError {
    SpecRefError::InvalidScheduleConfig(msg.into())
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| invalid(format!("cannot parse {key} = {raw:?}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(invalid(format!("{key} must be a boolean, got {raw:?}"))),
    }
}

impl RunConfig {
    /// Defaults: 1000 training steps, linear betas in `[1e-4, 0.02]`, 50
    /// sampling steps, gating over steps 50..=10 and layers 3..=4.
    pub fn default_text(seed: u64) -> String {
        format!(
            "seed = {seed}\n\
             train_steps = 1000\n\
             sample_steps = 50\n\
             beta_min = 0.0001\n\
             beta_max = 0.02\n\
             gate_t_start = 50\n\
             gate_t_end = 10\n\
             gate_l_start = 3\n\
             gate_l_end = 4\n\
             mt_threshold = 0.3\n\
             blend_threshold = 0.3\n\
             mt_soft = false\n\
             p2p_inject = false\n"
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            if !REQUIRED.contains(&key) && !OPTIONAL.contains(&key) {
                return Err(invalid(format!("line {}: unknown key {key:?}", lineno + 1)));
            }
            if raw.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(invalid(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        for key in REQUIRED {
            if !raw.contains_key(*key) {
                return Err(invalid(format!("missing required key {key:?}")));
            }
        }
        let get = |k: &str| raw[k].as_str();

        let blend_mode = match raw.get("blend_mode").map(String::as_str) {
            None | Some("local") => BlendMode::Local,
            Some("empty") => BlendMode::Empty,
            Some("full") => BlendMode::Full,
            Some(other) => {
                return Err(invalid(format!("blend_mode must be local, empty or full, got {other:?}")))
            }
        };
        let backend = match raw.get("backend").map(String::as_str) {
            None | Some("toy") => BackendKind::Toy,
            Some("zero") => BackendKind::Zero,
            Some(other) => return Err(invalid(format!("backend must be toy or zero, got {other:?}"))),
        };

        let cfg = Self {
            seed: parse_value("seed", get("seed"))?,
            train_steps: parse_value("train_steps", get("train_steps"))?,
            sample_steps: parse_value("sample_steps", get("sample_steps"))?,
            beta_min: parse_value("beta_min", get("beta_min"))?,
            beta_max: parse_value("beta_max", get("beta_max"))?,
            gate_t_start: parse_value("gate_t_start", get("gate_t_start"))?,
            gate_t_end: parse_value("gate_t_end", get("gate_t_end"))?,
            gate_l_start: parse_value("gate_l_start", get("gate_l_start"))?,
            gate_l_end: parse_value("gate_l_end", get("gate_l_end"))?,
            gate_enabled: match raw.get("gate_enabled") {
                Some(v) => parse_bool("gate_enabled", v)?,
                None => true,
            },
            mt_threshold: parse_value("mt_threshold", get("mt_threshold"))?,
            blend_threshold: parse_value("blend_threshold", get("blend_threshold"))?,
            mt_soft: parse_bool("mt_soft", get("mt_soft"))?,
            p2p_inject: parse_bool("p2p_inject", get("p2p_inject"))?,
            blend_mode,
            backend,
            dump_dir: raw.get("dump_dir").map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        let schedule = self.schedule()?;
        for (name, v) in [("mt_threshold", self.mt_threshold), ("blend_threshold", self.blend_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        let layers = self.backend_config().block_resolutions.len();
        if self.gate_enabled {
            self.gating_policy().validate(schedule.steps(), layers)?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.train_steps, self.sample_steps, (self.beta_min, self.beta_max))
    }

    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig::toy(self.seed)
    }

    pub fn gating_policy(&self) -> GatingPolicy {
        GatingPolicy {
            step_range: (self.gate_t_start, self.gate_t_end),
            layer_range: (self.gate_l_start, self.gate_l_end),
        }
    }

    /// The gating policy, or `None` when `gate_enabled = false`.
    pub fn gating(&self) -> Option<GatingPolicy> {
        self.gate_enabled.then(|| self.gating_policy())
    }

    pub fn edit_options(&self) -> EditOptions {
        EditOptions {
            mt_threshold: self.mt_threshold,
            blend_threshold: self.blend_threshold,
            mt_soft: self.mt_soft,
            p2p_inject: self.p2p_inject,
            blend: self.blend_mode.clone(),
            fixed_target_mask: None,
        }
    }
}
