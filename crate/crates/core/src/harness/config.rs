//! Experiment configuration: `section.key = value` text with JSON values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::agents::{Mode, TrainConfig};
use crate::envs::EnvConfig;
use crate::error::{Error, Result};

/// A value is read as JSON when it parses, otherwise as a bare string.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `a.b.c` inside nested objects, creating them as needed.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Parse(format!("malformed key `{key}`")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Parse(format!("`{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one part")
}

/// Parses `key = value` lines. `#` starts a comment line; a `[section]`
/// line prefixes the keys that follow it.
pub fn parse_kv(text: &str) -> Result<Value> {
    let mut root = Value::Object(Map::new());
    let mut section = String::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
        let key = if section.is_empty() { key.trim().to_string() } else { format!("{section}.{}", key.trim()) };
        set_dotted(&mut root, &key, parse_value(value)).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
    }
    Ok(root)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub label: String,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Modes to run; `train.mode` alone when empty.
    pub modes: Vec<Mode>,
    pub out: PathBuf,
    /// Episodes on held-out seeds used for the state-prediction MSE.
    pub held_out_episodes: usize,
    /// Episodes used to refit the end-to-end embedding.
    pub calibration_episodes: usize,
    /// Concurrent runs.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            label: "run".into(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0],
            modes: Vec::new(),
            out: PathBuf::from("runs"),
            held_out_episodes: 10,
            calibration_episodes: 10,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        Self::from_value(parse_kv(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }

    /// Applies `dotted.key = value` overrides on top of this config.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for (k, raw) in overrides {
            set_dotted(&mut v, k, parse_value(raw))?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        let mut modes = self.run_modes();
        modes.sort();
        if modes.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("modes must be distinct".into()));
        }
        if self.label.is_empty() || !self.label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(Error::Config(format!("label `{}` must be nonempty [A-Za-z0-9._-]", self.label)));
        }
        if self.held_out_episodes == 0 {
            return Err(Error::Config("held_out_episodes must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn run_modes(&self) -> Vec<Mode> {
        if self.modes.is_empty() {
            vec![self.train.mode]
        } else {
            self.modes.clone()
        }
    }

    /// Training config of one run.
    pub fn train_for(&self, mode: Mode, seed: u64) -> TrainConfig {
        TrainConfig { mode, seed, ..self.train.clone() }
    }

    /// The config with run-identity fields blanked; two experiments whose
    /// curves may be pooled have equal comparison keys.
    pub fn comparison_key(&self) -> Value {
        let mut c = self.clone();
        c.label = String::new();
        c.seeds.clear();
        c.modes.clear();
        c.out = PathBuf::new();
        c.workers = 1;
        c.train.mode = Mode::Psrl;
        c.train.seed = 0;
        serde_json::to_value(c).expect("config serialises")
    }
}
