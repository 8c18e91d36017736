//! Metrics records written by every command.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const METRICS_SCHEMA: &str = include_str!("../schema/metrics.schema.json");
pub const DISTILL_BATCH_SCHEMA: &str = include_str!("../schema/distill_batch.schema.json");
pub const PREFERENCE_PAIR_SCHEMA: &str = include_str!("../schema/preference_pair.schema.json");

/// Keys holding wall-clock measurements.
pub const TIMING_KEYS: &[&str] = &["timing", "wall_secs", "tokens_per_sec", "speedup_vs_sequential"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    /// Relative to the command's output directory.
    pub path: String,
    pub manifest_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<CheckpointRef>,
    pub results: Value,
    pub timing: Timing,
}

impl Metrics {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// `v` with every timing key removed, recursively.
pub fn strip_timing(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.iter()
                .filter(|(k, _)| !TIMING_KEYS.contains(&k.as_str()))
                .map(|(k, x)| (k.clone(), strip_timing(x)))
                .collect(),
        ),
        Value::Array(a) => Value::Array(a.iter().map(strip_timing).collect()),
        other => other.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn strip_timing_is_recursive() {
        let v = json!({"a": 1, "timing": {"wall_secs": 2.0}, "b": [{"tokens_per_sec": 3.0, "c": 4}]});
        assert_eq!(strip_timing(&v), json!({"a": 1, "b": [{"c": 4}]}));
    }

    #[test]
    fn schemas_are_json() {
        for s in [METRICS_SCHEMA, DISTILL_BATCH_SCHEMA, PREFERENCE_PAIR_SCHEMA] {
            serde_json::from_str::<Value>(s).unwrap();
        }
    }
}
