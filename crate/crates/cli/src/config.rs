use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use deepfeaturex::basemodel::BaseModelConfig;
use deepfeaturex::data::GenBenchSpec;
use deepfeaturex::fusion::HeadTrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Invalid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of the image tree read by `ingest`.
    pub corpus: Option<PathBuf>,
    /// Seed for every data-sampling step.
    pub seed: u64,
    /// BASE_TRAIN / HEAD_TRAIN / TEST fractions.
    pub split_fractions: [f64; 3],
    /// Share of each training manifest held out for validation.
    pub val_fraction: f64,
    pub unbalance_ratio: f64,
    /// Template for the three base models; seeds are offset by class index.
    pub base: BaseModelConfig,
    pub head: HeadTrainConfig,
    pub qf_list: Vec<i64>,
    pub benches: Vec<GenBenchSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            seed: 0,
            split_fractions: [0.4, 0.4, 0.2],
            val_fraction: 0.1,
            unbalance_ratio: 0.9,
            base: BaseModelConfig::default(),
            head: HeadTrainConfig::default(),
            qf_list: vec![90, 80, 70, 60, 50],
            benches: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Merges the file at `path` (if any) over the defaults, then applies
    /// `key=value` overrides. Values are parsed as JSON and fall back to
    /// plain strings.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(p) = path {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| Invalid(format!("config {}: {e}", p.display())))?;
            merge(&mut value, file);
        }
        for kv in overrides {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Invalid(format!("--set expects key=value, got {kv:?}")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            set_path(&mut value, key, parsed)?;
        }
        let cfg: Self =
            serde_json::from_value(value).map_err(|e| Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Invalid> {
        let sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| !(*f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Invalid(format!(
                "split_fractions {:?} must be positive and sum to 1",
                self.split_fractions
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Invalid(format!(
                "val_fraction {} outside (0,1)",
                self.val_fraction
            )));
        }
        if !(self.unbalance_ratio > 0.0 && self.unbalance_ratio < 1.0) {
            return Err(Invalid(format!(
                "unbalance_ratio {} outside (0,1)",
                self.unbalance_ratio
            )));
        }
        if let Some(q) = self.qf_list.iter().find(|q| !(1..=100).contains(*q)) {
            return Err(Invalid(format!("quality factor {q} outside 1..=100")));
        }
        Ok(())
    }
}

/// Objects merge key by key; anything else replaces.
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
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, new: Value) -> Result<(), Invalid> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Invalid(format!("--set {key}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), new);
            return Ok(());
        }
        cur = obj
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Invalid(format!("--set: empty key in {key:?}")))
}
