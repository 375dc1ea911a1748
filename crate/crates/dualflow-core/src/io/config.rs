//! Line-oriented `key = value` config files. `#` starts a comment; blank
//! lines are skipped; later keys override earlier ones.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CoreError, Result};

pub fn parse_config_str(s: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in s.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CoreError::Format(format!("config line {}: no '=' in '{line}'", lineno + 1))
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(CoreError::Format(format!("config line {}: empty key", lineno + 1)));
        }
        map.insert(key.to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let s = std::fs::read_to_string(path)?;
    parse_config_str(&s)
}

pub fn render_config(map: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    for (k, v) in map {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}

pub fn write_config(map: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    std::fs::write(path, render_config(map))?;
    Ok(())
}
