//! Flat key=value config files and seed resolution.
//!
//! Format: one `key = value` pair per line, `#` starts a comment, blank lines
//! ignored. Keys are dotted paths (`sde.beta_min`, `flow.steps`). All lookups
//! take a default so a partial file works; parse failures on present keys are
//! hard errors rather than silent fallbacks.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("config line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Format(format!("config line {}: empty key", lineno + 1)));
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Config { map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get_str<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.map.get(key).map(|s| s.as_str()).unwrap_or(default)
    }

    fn get_parsed<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::Format(format!(
                    "config key {key:?}: cannot parse {raw:?} as {}",
                    std::any::type_name::<T>()
                ))
            }),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        self.get_parsed(key, default)
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.get_parsed(key, default)
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        self.get_parsed(key, default)
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(other) => Err(Error::Format(format!(
                "config key {key:?}: cannot parse {other:?} as bool"
            ))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

/// Seed precedence: AMPOST_SEED env var, then an explicit CLI value, then the
/// config's `seed` key, then 0.
pub fn resolve_seed(cli: Option<u64>, cfg: &Config) -> Result<u64> {
    resolve_seed_from(std::env::var("AMPOST_SEED").ok().as_deref(), cli, cfg)
}

fn resolve_seed_from(env: Option<&str>, cli: Option<u64>, cfg: &Config) -> Result<u64> {
    if let Some(raw) = env {
        return raw
            .parse()
            .map_err(|_| Error::Format(format!("AMPOST_SEED: cannot parse {raw:?} as u64")));
    }
    if let Some(s) = cli {
        return Ok(s);
    }
    cfg.get_u64("seed", 0)
}
