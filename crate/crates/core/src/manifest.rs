//! Provenance record written once into every output directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides the clock.
    pub created_unix: u64,
    /// Command-specific records (benchmark description, run choices, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, inputs: Vec<String>, seeds: Vec<u64>) -> Self {
        Manifest {
            command: command.to_string(),
            config_hash: hash_json(&config),
            config,
            inputs,
            seeds,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: now_unix(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: serde_json::Value) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(MANIFEST_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&p, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// SHA-256 hex of a JSON value serialized with sorted keys.
pub fn hash_json(v: &serde_json::Value) -> String {
    // serde_json maps are ordered by key unless `preserve_order` is enabled.
    let text = serde_json::to_string(v).unwrap_or_default();
    sha256_hex(text.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    crate::learner::hex(&Sha256::digest(bytes))
}

fn now_unix() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()) {
        return v;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_insertion_order() {
        let a = serde_json::json!({"b": 1, "a": 2});
        let b: serde_json::Value = serde_json::from_str(r#"{"a":2,"b":1}"#).unwrap();
        assert_eq!(hash_json(&a), hash_json(&b));
        assert_eq!(sha256_hex(b"").len(), 64);
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new("x", serde_json::json!({"k": 1}), vec!["in".into()], vec![1, 2])
            .with("note", serde_json::json!("y"));
        m.write(dir.path()).unwrap();
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
    }
}
