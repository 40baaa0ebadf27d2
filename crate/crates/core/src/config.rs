//! Run configuration: one JSON file covering every pipeline stage, plus
//! dotted `key=value` command-line overrides.

use crate::data::NoiseCase;
use crate::error::{DenasError, Result};
use crate::search::{SearchConfig, TrainConfig};
use crate::supernet::PartSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Dataset generation settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub patch: usize,
    pub count: usize,
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            patch: 32,
            count: 128,
            split_ratio: 0.5,
            seed: 0,
        }
    }
}

/// Prior pre-training settings; the prior's width always follows the
/// part spec's base width.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub plateau_tol: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            epochs: 40,
            lr: 1e-3,
            plateau_tol: 1e-7,
            seed: 1,
        }
    }
}

/// Latency-table measurement settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LutConfig {
    pub reps: usize,
    pub warmups: usize,
    pub input_hw: usize,
}

impl Default for LutConfig {
    fn default() -> Self {
        LutConfig {
            reps: 5,
            warmups: 2,
            input_hw: 32,
        }
    }
}

/// The full pipeline configuration (desk-scale defaults).
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub spec: PartSpec,
    pub parts: usize,
    pub noise: NoiseCase,
    pub data: DataConfig,
    pub prior: PriorConfig,
    pub lut: LutConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
}

impl Default for NoiseCase {
    fn default() -> Self {
        NoiseCase::Awgn {
            sigma: 25.0 / 255.0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn desk_default() -> Self {
        RunConfig {
            spec: PartSpec {
                rows: 2,
                cells_per_row: 4,
                base_width: 16,
                in_channels: 1,
                seed: 0,
            },
            parts: 3,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 {
            return Err(DenasError::Config("parts must be >= 1".into()));
        }
        self.spec.validate()?;
        self.search.validate()?;
        if self.data.count == 0 || self.data.patch == 0 {
            return Err(DenasError::Config("data count/patch must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.data.split_ratio) {
            return Err(DenasError::Config("split_ratio outside [0,1]".into()));
        }
        Ok(())
    }

    /// Load from a JSON file, then apply `key=value` overrides with
    /// dotted paths (e.g. `search.epochs=5`). Returns the config and the
    /// applied-override log lines.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<(Self, Vec<String>)> {
        let base = match path {
            Some(p) => serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(p)?)?,
            None => serde_json::to_value(RunConfig::desk_default())?,
        };
        let (value, log) = apply_overrides(base, overrides)?;
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| DenasError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok((cfg, log))
    }

    /// Pretty JSON echo of the resolved configuration.
    pub fn echo(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Set dotted paths inside a JSON value; each value parses as JSON when
/// possible, otherwise as a string.
pub fn apply_overrides(
    mut value: serde_json::Value,
    overrides: &[String],
) -> Result<(serde_json::Value, Vec<String>)> {
    let mut log = vec![];
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| DenasError::Config(format!("override `{ov}` is not key=value")))?;
        let new: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let segs: Vec<&str> = key.split('.').collect();
        set_path(&mut value, key, &segs, new.clone())?;
        log.push(format!("override {key} = {new}"));
    }
    Ok((value, log))
}

fn set_path(
    node: &mut serde_json::Value,
    key: &str,
    segs: &[&str],
    new: serde_json::Value,
) -> Result<()> {
    let map = node
        .as_object_mut()
        .ok_or_else(|| DenasError::Config(format!("override path `{key}` invalid")))?;
    if segs.len() == 1 {
        map.insert(segs[0].to_string(), new);
        return Ok(());
    }
    let child = map
        .entry(segs[0].to_string())
        .or_insert_with(|| serde_json::Value::Object(Default::default()));
    set_path(child, key, &segs[1..], new)
}
