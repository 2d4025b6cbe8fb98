//! CSV tables and JSON summaries, each stamped with the hash of the config
//! that produced them.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// First 16 hex digits of the SHA-256 of the config's compact JSON form.
/// Object keys serialize in sorted order, so equal configs hash equally.
pub fn config_hash(config: &Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    hex::encode(digest)[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Inserts a `config_hash` column after the first one.
    pub fn stamped(mut self, config_hash: &str) -> Self {
        let at = self.header.len().min(1);
        self.header.insert(at, "config_hash".to_string());
        for r in &mut self.rows {
            r.insert(at, config_hash.to_string());
        }
        self
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `{config_hash, config, aggregates}` as pretty JSON.
pub fn write_summary(path: &Path, config: &Value, aggregates: &Value) -> Result<()> {
    let doc = json!({
        "config_hash": config_hash(config),
        "config": config,
        "aggregates": aggregates,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
