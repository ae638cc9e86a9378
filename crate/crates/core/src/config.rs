//! `key = value` configuration files.
//!
//! One setting per line; blank lines and lines starting with `#` are skipped. Keys are
//! long flag names without the leading dashes; `_` and `-` are interchangeable.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigEntry {
    /// Normalized to dashes.
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_config(text: &str) -> Result<Vec<ConfigEntry>> {
    let mut out: Vec<ConfigEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidParameter(format!("config line {}: expected key = value", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(Error::InvalidParameter(format!("config line {}: bad key {:?}", i + 1, k.trim())));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::InvalidParameter(format!(
                "config line {}: {key} already set on line {}",
                i + 1,
                prev.line
            )));
        }
        out.push(ConfigEntry { key, value: v.trim().to_string(), line: i + 1 });
    }
    Ok(out)
}
