//! The run configuration file and its validation.

use std::fs;
use std::path::{Path, PathBuf};

use r2au_core::training::TrainConfig;
use r2au_core::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const SEED_ENV: &str = "R2AU_SEED";

fn default_val_count() -> usize {
    30
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root in the DSB-2018 layout; `--data` takes precedence.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Name written to the `dataset` column; defaults to the root's directory name.
    #[serde(default)]
    pub name: Option<String>,
    /// Images held out for validation.
    #[serde(default = "default_val_count")]
    pub val_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            name: None,
            val_count: default_val_count(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Optimizer, schedule, loss, augmentation and checkpointing.
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::usage(format!("config error at `{}`: {}", e.path(), e.inner())))
    }

    /// Reads, validates and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| {
                CliError::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model
            .validate()
            .map_err(|e| CliError::usage(format!("config error at `model`: {e}")))?;
        if self.model.height != self.model.width {
            return Err(CliError::usage(format!(
                "config error at `model.height`: images are square, got {}x{}",
                self.model.height, self.model.width
            )));
        }
        if self.model.in_channels != 1 {
            return Err(CliError::usage(
                "config error at `model.in_channels`: only grayscale input is supported".into(),
            ));
        }
        if self.data.val_count == 0 {
            return Err(CliError::usage(
                "config error at `data.val_count`: must be at least 1".into(),
            ));
        }
        self.train
            .check()
            .map_err(|(f, m)| CliError::usage(format!("config error at `train.{f}`: {m}")))
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Path of the first field where `a` and `b` differ.
pub fn first_difference(a: &Value, b: &Value) -> Option<String> {
    fn walk(a: &Value, b: &Value, path: &str) -> Option<String> {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                keys.into_iter().find_map(|k| {
                    let sub = if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, &sub),
                        _ => Some(sub),
                    }
                })
            }
            (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x
                .iter()
                .zip(y)
                .enumerate()
                .find_map(|(i, (u, v))| walk(u, v, &format!("{path}[{i}]"))),
            _ if a == b => None,
            _ => Some(if path.is_empty() {
                ".".into()
            } else {
                path.into()
            }),
        }
    }
    walk(a, b, "")
}
