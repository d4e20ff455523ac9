//! Flat `key = value` text used by run configs and embedded in checkpoints.
//! Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{config, Error, Result};

/// Parsed pairs; every key must be consumed or [`KvMap::finish`] fails.
#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<KvMap> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config(format!("line {}: expected key=value, got `{line}`", i + 1));
            };
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return config(format!("line {}: duplicate key `{k}`", i + 1));
            }
        }
        Ok(KvMap { entries })
    }

    /// Applies `overrides` (`key=value` strings) on top.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return config(format!("override `{o}` is not key=value"));
            };
            self.entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(s) => s.parse().map(Some).map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`"))),
        }
    }

    pub fn take_or<V: FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn take_list<V: FromStr>(&mut self, key: &str) -> Result<Option<Vec<V>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(s) => s
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{p}`"))))
                .collect::<Result<Vec<V>>>()
                .map(Some),
        }
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_keys().next() {
            Some(k) => Err(Error::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

/// Ordered writer producing text [`KvMap::parse`] reads back.
#[derive(Clone, Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn put_list<V: std::fmt::Display>(&mut self, key: &str, values: &[V]) -> &mut Self {
        let s: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.put(key, s.join(","))
    }

    pub fn finish(&self) -> String {
        self.out.clone()
    }
}
