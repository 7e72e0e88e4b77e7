//! Layered run configuration: defaults < JSON file < `ICSCAN_*` environment
//! variables < command-line flags.
//!
//! Environment keys map to config paths by lowercasing and reading `__` as a
//! path separator, so `ICSCAN_MODEL__TRAIN__BATCH_SIZE=16` sets
//! `model.train.batch_size`. Values are parsed as JSON and fall back to plain
//! strings.

use std::path::Path;

use icscan::datagen::{apply_center_shift, DatasetConfig, ExtractConfig, ProfileDelta};
use icscan::experiment::ExperimentConfig;
use icscan::model::HybridConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "ICSCAN_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub reference: DatasetConfig,
    /// Target center; its stain profile is the reference profile plus `shift`.
    pub target: DatasetConfig,
    pub shift: ProfileDelta,
    pub extract: ExtractConfig,
    pub model: HybridConfig,
    /// Share of a center's training patients used for fitting; the rest validate.
    pub validation_ratio: f64,
    /// Slides timed by `bench`.
    pub bench_slides: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: e.seed,
            workers: 0,
            reference: e.reference,
            target: e.target,
            shift: e.shift,
            extract: e.extract,
            model: e.model,
            validation_ratio: e.validation_ratio,
            bench_slides: 5,
        }
    }
}

impl RunConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            reference: self.reference.clone(),
            target: self.target.clone(),
            shift: self.shift.clone(),
            extract: self.extract.clone(),
            model: self.model.clone(),
            validation_ratio: self.validation_ratio,
            seed: self.seed,
        }
    }

    /// Target dataset config with the shifted stain profile.
    pub fn target_dataset(&self) -> Result<DatasetConfig, CliError> {
        let profile = apply_center_shift(&self.reference.profile, &self.shift, &self.target.profile.center_id)?;
        Ok(DatasetConfig { profile, ..self.target.clone() })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.reference.validate()?;
        self.target_dataset()?.validate()?;
        if self.reference.profile.center_id == self.target.profile.center_id {
            return Err(CliError::Config("reference and target center ids must differ".into()));
        }
        self.model.train.validate()?;
        self.extract.segmentation.validate()?;
        self.extract.filter.validate()?;
        if self.extract.input_side != self.model.arch.input_side {
            return Err(CliError::Config(format!(
                "extract.input_side {} differs from model.arch.input_side {}",
                self.extract.input_side, self.model.arch.input_side
            )));
        }
        if !(self.validation_ratio > 0.0 && self.validation_ratio < 1.0) {
            return Err(CliError::Config("validation_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything that feeds [`load`], in increasing precedence.
#[derive(Clone, Debug, Default)]
pub struct Layers {
    pub file: Option<std::path::PathBuf>,
    pub env: Vec<(String, String)>,
    /// `key.path=value` overrides.
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    /// Applied to both centers' IC slide share.
    pub ic_fraction: Option<f64>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets a dotted path, creating objects on the way. Unknown keys are caught
/// when the merged value is deserialized.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad config key {path:?}")));
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        if !node.is_object() {
            return Err(CliError::Config(format!("config key {path:?} descends into a non-object")));
        }
        node = node.as_object_mut().expect("checked").entry(k.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(CliError::Config(format!("config key {path:?} descends into a non-object"))),
    }
}

pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load(layers: &Layers) -> Result<RunConfig, CliError> {
    let mut v = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(path) = &layers.file {
        merge(&mut v, read_config_file(path)?);
    }
    let mut env: Vec<&(String, String)> = layers.env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (k, raw) in env {
        let path = k[ENV_PREFIX.len()..].to_lowercase().replace("__", ".");
        set_path(&mut v, &path, parse_value(raw))?;
    }
    for s in &layers.sets {
        let (k, raw) = s.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        set_path(&mut v, k.trim(), parse_value(raw.trim()))?;
    }
    if let Some(seed) = layers.seed {
        v["seed"] = seed.into();
    }
    if let Some(w) = layers.workers {
        v["workers"] = w.into();
    }
    if let Some(f) = layers.ic_fraction {
        v["reference"]["ic_slide_fraction"] = f.into();
        v["target"]["ic_slide_fraction"] = f.into();
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
