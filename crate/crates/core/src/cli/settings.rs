//! Merges a `key=value` config file with command-line flags; flags win.
//! Every resolved value is recorded for the run manifest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::CliError;

pub struct Settings {
    file: BTreeMap<String, String>,
    used: Vec<String>,
    pub resolved: BTreeMap<String, String>,
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Settings {
    pub fn load(config: Option<&Path>) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_key_values(&text, &path.display().to_string())? {
                file.insert(k.replace('_', "-"), v);
            }
        }
        Ok(Settings { file, used: Vec::new(), resolved: BTreeMap::new() })
    }

    fn file_value<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError> {
        self.used.push(key.to_string());
        match self.file.get(key) {
            Some(text) => text.parse().map(Some).map_err(|_| CliError::Usage(format!("config value {key}={text:?} is invalid"))),
            None => Ok(None),
        }
    }

    pub fn opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        let value = match flag {
            Some(v) => {
                self.used.push(key.to_string());
                Some(v)
            }
            None => self.file_value(key)?,
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        let v = self.opt(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError> {
        self.opt(key, flag)?.ok_or_else(|| CliError::Usage(format!("--{key} is required")))
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.require::<String>(key, flag.map(|p| p.display().to_string())).map(PathBuf::from)
    }

    pub fn opt_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        Ok(self.opt::<String>(key, flag.map(|p| p.display().to_string()))?.map(PathBuf::from))
    }

    pub fn flag(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        let v = flag || self.file_value::<bool>(key)?.unwrap_or(false);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Rejects config keys that no option consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        let unknown: Vec<&str> = self.file.keys().filter(|k| !self.used.contains(k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }
}
