//! Pipeline configuration: one JSON document with a section per stage.
//!
//! Precedence is flag > file > default. A config file only needs the keys it
//! changes; `--set key=value` edits single keys with dotted paths such as
//! `scene.C` or `train.epochs`.

use std::fs;
use std::path::Path;

use evtforce_core::frame::FrameSpec;
use evtforce_core::synth::{GraspProfileConfig, GripperScene, SynthError};
use evtforce_core::train::TrainConfig;
use evtforce_core::vit::ViTConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

/// How synthetic recordings are generated and stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub recordings: usize,
    pub substeps_per_sample: u32,
    /// `evb` or `csv`.
    pub format: String,
    pub profile: GraspProfileConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            recordings: 25,
            substeps_per_sample: 4,
            format: "evb".into(),
            profile: GraspProfileConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root of every random choice; stages derive named sub-seeds from it.
    pub seed: u64,
    pub scene: GripperScene,
    pub synth: SynthSection,
    pub frame: FrameSpec,
    pub model: ViTConfig,
    pub train: TrainConfig,
}

fn config_err(key: impl Into<String>, reason: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

impl PipelineConfig {
    /// Loads `path` (if any), applies `--set` overrides and validates.
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::Invalid(format!("{}: not valid JSON: {e}", p.display()))
                })?
            }
            None => Value::Object(Map::new()),
        };
        for s in sets {
            apply_set(&mut doc, s)?;
        }
        let mut cfg: PipelineConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let key = e.path().to_string();
            config_err(key, e.into_inner().to_string())
        })?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Runs every section's own validation, prefixing keys with the section.
    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate().map_err(|e| match e {
            SynthError::InvalidScene { key, reason } => config_err(format!("scene.{key}"), reason),
            other => config_err("scene", other.to_string()),
        })?;
        self.synth.profile.validate().map_err(|e| match e {
            SynthError::InvalidScene { key, reason } => {
                config_err(format!("synth.profile.{key}"), reason)
            }
            other => config_err("synth.profile.rate_hz", other.to_string()),
        })?;
        if self.synth.substeps_per_sample == 0 {
            return Err(config_err("synth.substeps_per_sample", "must be >= 1"));
        }
        if !matches!(self.synth.format.as_str(), "evb" | "csv") {
            return Err(config_err(
                "synth.format",
                format!("must be \"evb\" or \"csv\", got {:?}", self.synth.format),
            ));
        }
        self.frame
            .validate()
            .map_err(|e| config_err(format!("frame.{}", e.key), e.reason))?;
        self.model.validate().map_err(CliError::from)?;
        self.train.validate().map_err(CliError::from)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, lowercase hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Applies one `key=value` override. The value is read as JSON when it
/// parses as JSON and as a plain string otherwise.
pub fn apply_set(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!(
            "--set has a malformed key {key:?}"
        )));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(config_err(
                parts[..i].join("."),
                "is not a section and has no sub-keys",
            ));
        }
        let obj = node.as_object_mut().expect("checked object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    unreachable!("loop returns on the last key")
}
