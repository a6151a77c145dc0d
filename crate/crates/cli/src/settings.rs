//! Usage errors, `key=value` config files and flag precedence.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::Result;
use cevae_core::trainer::TrainConfig;
use cevae_core::{AblationMode, ModelConfig};

/// A problem with how the command was invoked. Exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Keys a config file may set. Dashes and underscores are interchangeable.
pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "ablation",
    "steps",
    "lr",
    "batch_size",
    "toggles",
    "disc_start_step",
    "augment",
    "mode",
    "layout",
    "dtype",
    "eval_every",
];

/// Values from a config file. Flags win over these, and these win over the
/// built-in defaults.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected key=value", i + 1)))?;
            let key = k.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) {
                return Err(usage(format!(
                    "config line {}: unknown key '{key}' (known: {})",
                    i + 1,
                    KEYS.join(", ")
                )));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        debug_assert!(KEYS.contains(&key), "{key} is not a config key");
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config key {key}: {e}"))),
            None => Ok(None),
        }
    }

    pub fn pick_or<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 32x32 images, trains on one core in minutes.
    Desk,
    /// 256x256 images with the full-size latent.
    Reference,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "reference" => Ok(Preset::Reference),
            other => Err(format!("unknown preset '{other}' (desk or reference)")),
        }
    }
}

impl Preset {
    pub fn model(self, mode: AblationMode) -> ModelConfig {
        let mut cfg = match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Reference => ModelConfig::reference(),
        };
        cfg.mode = mode;
        cfg
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Reference => TrainConfig::reference(),
        }
    }
}
