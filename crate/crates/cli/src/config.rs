//! `key = value` settings file. Blank lines and `#` comments are ignored;
//! keys are case-insensitive and `_` is equivalent to `-`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn canonical(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

impl Settings {
    pub fn parse(src: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in src.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let key = canonical(k);
            if key.is_empty() {
                return Err(anyhow!("line {}: empty key", i + 1));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&src).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(&canonical(key))
    }

    /// Flag value if given, else the config value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(&canonical(key)) {
            Some(raw) => raw
                .parse()
                .map_err(|e| anyhow!("config key {key:?}: cannot parse {raw:?}: {e}")),
            None => Ok(default),
        }
    }
}
