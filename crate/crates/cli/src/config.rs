//! Flat key=value run configuration with '#' comments. Every key must be
//! consumed by the subcommand that reads it; leftovers are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<ConfigMap, ConfigError> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.split_once('#') {
                Some((before, _)) => before,
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() {
                return Err(ConfigError(format!("line {}: empty key", lineno + 1)));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(ConfigError(format!("duplicate key '{key}'")));
            }
        }
        Ok(ConfigMap { values })
    }

    pub fn load(path: &Path) -> Result<ConfigMap, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        ConfigMap::parse(&text)
    }

    pub fn empty() -> ConfigMap {
        ConfigMap { values: BTreeMap::new() }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T, ConfigError> {
        let raw = self
            .take(key)
            .ok_or_else(|| ConfigError(format!("missing required key '{key}'")))?;
        raw.parse()
            .map_err(|_| ConfigError(format!("key '{key}': cannot parse '{raw}'")))
    }

    pub fn optional<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| ConfigError(format!("key '{key}': cannot parse '{raw}'"))),
        }
    }

    pub fn optional_string(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    pub fn require_string(&mut self, key: &str) -> Result<String, ConfigError> {
        self.take(key)
            .ok_or_else(|| ConfigError(format!("missing required key '{key}'")))
    }

    /// Rejects any key the subcommand did not consume.
    pub fn finish(self) -> Result<(), ConfigError> {
        if self.values.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.values.keys().map(String::as_str).collect();
            Err(ConfigError(format!("unknown keys: {}", keys.join(", "))))
        }
    }
}
