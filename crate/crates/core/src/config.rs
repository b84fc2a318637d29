//! Run configuration: a TOML file with `[ceo]`, `[train]`, `[synth]` and
//! `[paths]` sections plus a global `seed` and optional `workers`.
//!
//! Section seeds that are not written explicitly are derived from the global
//! seed, so a single number fixes every random stream of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::avla::TrainConfig;
use crate::ceo::CeoConfig;
use crate::error::{Error, Result};
use crate::synth::SynthConfig;

/// File locations. Inputs are required by the subcommands that read them;
/// outputs default to files inside `out_dir`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: Option<PathBuf>,
    /// Embedding bank written by `synth` and read by `optimize`.
    pub bank: Option<PathBuf>,
    /// Feature dataset written by `synth` and read by `train` and `eval`.
    pub features: Option<PathBuf>,
    /// Bank with optimized embeddings, written by `optimize`.
    pub optimized_bank: Option<PathBuf>,
    pub ceo_trace: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub loss_curve: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub ceo: CeoConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

/// Seed of one section, derived from the global seed. Kept below 2^63 so it
/// fits a TOML integer when the configuration is echoed.
pub fn derive_seed(global: u64, section: &str) -> u64 {
    let digest = Sha256::digest(format!("ezgzl/{section}/{global}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) >> 1
}

const SECTIONS: [&str; 3] = ["ceo", "train", "synth"];

/// Sets `section.key = value`, creating the section if needed. The value is
/// parsed as a TOML literal and taken as a string when that fails, so
/// `0.3`, `true` and `mlp` all work. Dashes in keys become underscores.
pub fn apply_override(doc: &mut toml::Table, dotted: &str, value: &str) -> Result<()> {
    let key = dotted.replace('-', "_");
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("bad override {dotted:?}")))?;
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} is not a section")))?;
    }
    table.insert(last.to_string(), parsed);
    Ok(())
}

impl RunConfig {
    /// Parses and validates a configuration document, filling derived seeds.
    pub fn from_table(doc: toml::Table) -> Result<Self> {
        let explicit: Vec<bool> = SECTIONS
            .iter()
            .map(|s| doc.get(*s).and_then(|v| v.get("seed")).is_some())
            .collect();
        let mut cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let global = cfg.seed;
        for (section, given) in SECTIONS.iter().zip(explicit) {
            if !given {
                let s = derive_seed(global, section);
                match *section {
                    "ceo" => cfg.ceo.seed = s,
                    "train" => cfg.train.seed = s,
                    _ => cfg.synth.seed = s,
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.ceo.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be ≥ 1".into()));
        }
        Ok(())
    }

    /// The fully materialized configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    /// A required input path, or an error naming the missing key.
    pub fn input(&self, key: &str) -> Result<PathBuf> {
        let path = self
            .path(key)
            .ok_or_else(|| Error::Config(format!("missing required key paths.{key}")))?;
        if !path.exists() {
            return Err(Error::Config(format!("paths.{key} = {} does not exist", path.display())));
        }
        Ok(path)
    }

    /// An output path, defaulting to `out_dir/<default_name>`.
    pub fn output(&self, key: &str, default_name: &str) -> PathBuf {
        self.path(key).unwrap_or_else(|| self.out_dir().join(default_name))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let p = &self.paths;
        match key {
            "bank" => p.bank.clone(),
            "features" => p.features.clone(),
            "optimized_bank" => p.optimized_bank.clone(),
            "ceo_trace" => p.ceo_trace.clone(),
            "checkpoint" => p.checkpoint.clone(),
            "loss_curve" => p.loss_curve.clone(),
            "report" => p.report.clone(),
            _ => None,
        }
    }

    /// Digest of every setting that influences results. Paths and the worker
    /// count are excluded: they never change an output's bytes.
    pub fn settings_digest(&self, train: &TrainConfig) -> Result<String> {
        crate::evaluation::config_digest(&serde_json::json!({
            "seed": self.seed,
            "ceo": self.ceo,
            "train": train,
            "synth": self.synth,
        }))
    }
}

pub fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(e.message().to_string()))
}

/// Reads, parses and validates a configuration file.
pub fn validate_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::parse(&text)
}
