//! Flat `key = value` run configuration with command-line overrides.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::Context;

use crate::Invalid;

/// Raw values from a config file and `--set` overrides, restricted to the
/// keys a command understands. Every lookup is recorded so the resolved
/// configuration, defaults included, can be logged.
#[derive(Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl RunConfig {
    pub fn load(allowed: &[&str], file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = split_pair(line)
                    .ok_or_else(|| Invalid(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
                insert(&mut values, allowed, k, v)
                    .map_err(|e| Invalid(format!("{}:{}: {}", path.display(), n + 1, e.0)))?;
            }
        }
        for o in overrides {
            let (k, v) = split_pair(o).ok_or_else(|| Invalid(format!("override {o:?} is not key=value")))?;
            insert(&mut values, allowed, k, v)?;
        }
        Ok(RunConfig { values, resolved: RefCell::default() })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// The configured value of `key`, or `default` when absent.
    pub fn get<T>(&self, key: &str, default: T) -> Result<T, Invalid>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match self.values.get(key) {
            Some(raw) => raw.parse::<T>().map_err(|e| Invalid(format!("{key} = {raw:?}: {e}")))?,
            None => default,
        };
        self.resolved.borrow_mut().insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Every key looked up so far with its effective value, one
    /// `key = value` line each, sorted by key.
    pub fn resolved(&self) -> String {
        self.resolved.borrow().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn split_pair(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    Some((k.trim(), v.trim()))
}

fn insert(values: &mut BTreeMap<String, String>, allowed: &[&str], k: &str, v: &str) -> Result<(), Invalid> {
    if !allowed.contains(&k) {
        return Err(Invalid(format!("unknown config key {k:?} (known: {})", allowed.join(", "))));
    }
    values.insert(k.to_string(), v.to_string());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, "# comment\nsteps = 10\n\nseed=3\n").unwrap();
        let c = RunConfig::load(&["steps", "seed", "lr"], Some(&p), &["seed=4".into()]).unwrap();
        assert_eq!(c.get("steps", 0u64).unwrap(), 10);
        assert_eq!(c.get("seed", 0u64).unwrap(), 4);
        assert_eq!(c.get("lr", 0.5f64).unwrap(), 0.5);
        assert_eq!(c.resolved(), "lr = 0.5\nseed = 4\nsteps = 10\n");
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        assert!(RunConfig::load(&["steps"], None, &["stpes=3".into()]).is_err());
        assert!(RunConfig::load(&["steps"], None, &["steps".into()]).is_err());
        let c = RunConfig::load(&["steps"], None, &["steps=x".into()]).unwrap();
        assert!(c.get("steps", 0u64).is_err());
    }
}
