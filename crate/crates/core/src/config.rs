//! Run configuration: one TOML document with a section per component.
//!
//! Sections that do not set their own `seed` inherit the top-level one. Unknown keys
//! are rejected and errors name the offending key path.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::evalkit::ReidConfig;
use crate::labels::LossConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleConfig;
use crate::synthdata::SynthConfig;
use crate::trainer::TrainConfig;

/// Environment variable naming the default root for run directories.
pub const RUNS_ENV: &str = "VIDIFF_RUNS";
pub const DEFAULT_RUNS_ROOT: &str = "runs";

/// Sections that carry their own seed, inherited from the global one when unset.
pub const SEEDED_SECTIONS: [&str; 4] = ["data", "train", "sampler", "reid"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out renders per identity and modality.
    pub per_id: usize,
    /// CMC ranks to report.
    pub ranks: Vec<usize>,
    /// Mismatched pairs drawn for the identity-preservation null.
    pub null_pairs: usize,
    /// Symmetric noise applied to generated labels before classifier training.
    pub label_noise: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            per_id: 4,
            ranks: vec![1, 5, 10],
            null_pairs: 500,
            label_noise: 0.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_id == 0 {
            return Err(Error::Config("per_id must be at least 1".into()));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(Error::Config("ranks must be non-empty and positive".into()));
        }
        if self.null_pairs == 0 {
            return Err(Error::Config("null_pairs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Every knob of a run. The defaults form the desk-scale toy setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Root for run directories; falls back to `$VIDIFF_RUNS`, then `runs`.
    pub output_dir: Option<PathBuf>,
    pub data: SynthConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub reid: ReidConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            data: SynthConfig {
                n_ids: 4,
                per_id: 8,
                ..SynthConfig::default()
            },
            denoiser: DenoiserConfig {
                base_channels: 16,
                output_skip: Some(ScheduleConfig::default()),
                ..DenoiserConfig::default()
            },
            train: TrainConfig {
                learning_rate: 3e-3,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
            reid: ReidConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn in_section(section: &str, e: impl std::fmt::Display) -> Error {
    let msg = e.to_string();
    let msg = msg.lines().last().unwrap_or_default().trim().to_string();
    let key = msg
        .strip_prefix("unknown field `")
        .and_then(|rest| rest.split('`').next())
        .map(|k| format!("{section}.{k}"))
        .unwrap_or_else(|| section.to_string());
    Error::Config(format!("{key}: {msg}"))
}

fn section<T: DeserializeOwned + Default>(table: &mut toml::Table, name: &str) -> Result<T> {
    match table.remove(name) {
        None => Ok(T::default()),
        Some(v) => v.try_into().map_err(|e| in_section(name, e)),
    }
}

/// Parses a literal the way TOML would, treating anything unparseable as a string.
fn literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `path` (dot-separated) to `raw`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("{path}: malformed key path")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path}: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), literal(raw));
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies `overrides` (`key.path`, value) on top, then validates.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        for (k, v) in overrides {
            set_path(&mut table, k, v)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(mut table: toml::Table) -> Result<Self> {
        let seed = match table.remove("seed") {
            None => 0,
            Some(toml::Value::Integer(s)) if s >= 0 => s as u64,
            Some(other) => return Err(Error::Config(format!("seed: expected a non-negative integer, got {other}"))),
        };
        for name in SEEDED_SECTIONS {
            let entry = table
                .entry(name.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let Some(t) = entry.as_table_mut() {
                t.entry("seed".to_string()).or_insert(toml::Value::Integer(seed as i64));
            }
        }
        let output_dir = match table.remove("output_dir") {
            None => None,
            Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
            Some(other) => return Err(Error::Config(format!("output_dir: expected a string, got {other}"))),
        };
        let defaults = Self::default();
        let mut with_defaults = |name: &str| -> Result<()> {
            // sections start from the toy preset rather than the per-type defaults
            let base = match name {
                "data" => toml::Value::try_from(defaults.data),
                "denoiser" => toml::Value::try_from(&defaults.denoiser),
                "train" => toml::Value::try_from(defaults.train),
                _ => return Ok(()),
            }
            .expect("defaults serialize");
            let user = table
                .entry(name.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let Some(user_t) = user.as_table_mut() else {
                return Err(Error::Config(format!("{name}: expected a table")));
            };
            let mut merged = base.as_table().cloned().unwrap_or_default();
            for (k, v) in std::mem::take(user_t) {
                merged.insert(k, v);
            }
            *user_t = merged;
            Ok(())
        };
        for name in ["data", "denoiser", "train"] {
            with_defaults(name)?;
        }
        let cfg = Self {
            seed,
            output_dir,
            data: section(&mut table, "data")?,
            denoiser: section(&mut table, "denoiser")?,
            train: section(&mut table, "train")?,
            sampler: section(&mut table, "sampler")?,
            reid: section(&mut table, "reid")?,
            loss: section(&mut table, "loss")?,
            eval: section(&mut table, "eval")?,
        };
        if let Some(key) = table.keys().next() {
            return Err(Error::Config(format!("{key}: unknown key")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let at = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{name}: {m}")),
                other => other,
            })
        };
        at("data", self.data.validate())?;
        at("denoiser", self.denoiser.validate())?;
        at("train", self.train.validate())?;
        at("sampler", self.sampler.validate(self.train.schedule.timesteps))?;
        at("reid", self.reid.validate())?;
        at("loss", self.loss.validate())?;
        at("eval", self.eval.validate())?;
        if self.denoiser.image_size != self.data.size {
            return Err(Error::Config(format!(
                "denoiser.image_size: {:?} differs from data.size {:?}",
                self.denoiser.image_size, self.data.size
            )));
        }
        if let Some(skip) = &self.denoiser.output_skip {
            if *skip != self.train.schedule {
                return Err(Error::Config("denoiser.output_skip: must match train.schedule".into()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// `output_dir`, else `$VIDIFF_RUNS`, else `runs`.
    pub fn runs_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(RUNS_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS_ROOT))
    }
}
