//! `key = value` settings files. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

/// Keys a settings file may set.
pub const KEYS: &[&str] = &[
    "seed",
    "train_fraction",
    "folds",
    "consolidation",
    "class_threshold",
    "target_count",
    "flip_probability",
    "max_rotation_deg",
    "max_translation",
    "epochs",
    "batch_size",
    "head_lr",
    "patience",
    "min_improvement",
    "k",
    "bind",
    "weights",
    "max_upload_bytes",
    "timeout_ms",
    "resolution",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected `key = value`", i + 1);
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                bail!("line {}: unknown key `{k}`", i + 1);
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                bail!("line {}: `{k}` set twice", i + 1);
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        debug_assert!(KEYS.contains(&key), "undeclared key {key}");
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| anyhow::anyhow!("`{key} = {v}`: {e}")),
        }
    }

    /// `flag`, else the file's value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_precedence() {
        let c = KvConfig::parse("# run\nseed = 7\nepochs=12  # short\n\n").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(c.pick(None, "epochs", 30usize).unwrap(), 12);
        assert_eq!(c.pick(Some(3), "epochs", 30usize).unwrap(), 3);
        assert_eq!(c.pick(None, "folds", 10usize).unwrap(), 10);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(KvConfig::parse("seed 7").unwrap_err().to_string().contains("line 1"));
        assert!(KvConfig::parse("colour = red").is_err());
        assert!(KvConfig::parse("seed = 1\nseed = 2").is_err());
        let c = KvConfig::parse("seed = x").unwrap();
        assert!(c.get::<u64>("seed").is_err());
    }
}
