//! Experiment configuration: one TOML file with `game`, `channel`, `trainer`
//! and `run` sections, plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::meta_env::{ChannelConfig, GameConfig, MetaEnvConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory name of the run under `output_dir`.
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Store elapsed seconds in metrics records. Off by default so that
    /// metrics files are reproducible byte for byte.
    pub record_wallclock: bool,
    /// Write per-step environment telemetry next to the metrics.
    pub telemetry: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            record_wallclock: false,
            telemetry: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub game: GameConfig,
    pub channel: ChannelConfig,
    pub trainer: TrainConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.game.validate()?;
        self.channel.validate()?;
        self.trainer.validate()?;
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        let mut seen = self.run.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.run.seeds.len() {
            return Err(Error::Config("run.seeds contains duplicates".into()));
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run.name {:?} is not a plain directory name", self.run.name)));
        }
        Ok(())
    }

    pub fn meta_env_config(&self) -> MetaEnvConfig {
        MetaEnvConfig {
            game: self.game.clone(),
            channel: self.channel.clone(),
        }
    }

    /// Parse, apply `key.path=value` overrides and validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg: Self = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?
        } else {
            let mut table: toml::Table =
                toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
            for ov in overrides {
                apply_override(&mut table, ov)?;
            }
            let resolved = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
            toml::from_str(&resolved)
                .map_err(|e| Error::Config(format!("invalid config after overrides (positions refer to the resolved config):\n{e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Apply overrides to an already-resolved configuration.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_str(&self.to_toml()?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// Key-sorted JSON rendering; identical for configs that differ only in
    /// key order.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises to JSON");
        serde_json::to_string(&value).expect("JSON value renders")
    }

    /// Hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Set `a.b.c = value` in a TOML table. The value is parsed as a TOML
/// literal, falling back to a bare string (`trainer.encoder=sum_mlp`).
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override {assignment:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    };
    let (last, parents) = keys.split_last().expect("at least one key");
    let mut node = table;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {assignment:?}: {k} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
