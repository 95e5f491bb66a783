//! Run manifest: a flat, key-sorted JSON object.
//!
//! Floats are stored as 17-significant-digit strings so the file is
//! byte-stable and lossless. Stages run separately merge into the same file.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::error::{CliError, Result};
use crate::io::fmt_f64;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: BTreeMap<String, Value>,
}

impl Manifest {
    pub fn new() -> Self {
        let mut m = Self::default();
        m.set_str("software.name", env!("CARGO_PKG_NAME"));
        m.set_str("software.version", env!("CARGO_PKG_VERSION"));
        m
    }

    /// Loads an existing manifest, or starts a new one when the file is absent.
    pub fn load_or_new(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new());
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let entries: BTreeMap<String, Value> =
            serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))?;
        Ok(Self { entries })
    }

    pub fn set_str(&mut self, key: &str, v: impl Into<String>) {
        self.entries.insert(key.to_string(), Value::String(v.into()));
    }

    pub fn set_f64(&mut self, key: &str, v: f64) {
        self.set_str(key, fmt_f64(v));
    }

    pub fn set_u64(&mut self, key: &str, v: u64) {
        self.entries.insert(key.to_string(), Value::from(v));
    }

    pub fn set_usize(&mut self, key: &str, v: usize) {
        self.set_u64(key, v as u64);
    }

    pub fn set_bool(&mut self, key: &str, v: bool) {
        self.entries.insert(key.to_string(), Value::Bool(v));
    }

    pub fn set_f64s(&mut self, prefix: &str, names: &[String], values: &[f64]) {
        for (n, v) in names.iter().zip(values) {
            self.set_f64(&format!("{prefix}.{n}"), *v);
        }
    }

    /// Removes every key under `prefix.`, so a rerun stage does not leave stale values.
    pub fn clear_prefix(&mut self, prefix: &str) {
        let p = format!("{prefix}.");
        self.entries.retain(|k, _| !k.starts_with(&p));
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.remove(key);
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> &BTreeMap<String, Value> {
        &self.entries
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries).expect("string keys serialize");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_sorted_and_round_trip() {
        let mut m = Manifest::new();
        m.set_f64("z.value", 0.1);
        m.set_usize("a.count", 3);
        m.set_bool("m.flag", true);
        let json = m.to_json();
        let a = json.find("a.count").unwrap();
        let z = json.find("z.value").unwrap();
        assert!(a < z);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(FILE_NAME);
        m.write(&path).unwrap();
        let back = Manifest::load_or_new(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get("z.value").unwrap().as_str().unwrap().parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn clear_prefix_only_touches_prefix() {
        let mut m = Manifest::default();
        m.set_usize("stage.a", 1);
        m.set_usize("stage.b", 2);
        m.set_usize("stages", 3);
        m.clear_prefix("stage");
        assert_eq!(m.entries().len(), 1);
    }
}
