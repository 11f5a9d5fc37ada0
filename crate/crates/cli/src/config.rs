//! Run configuration: a flat `key = value` file merged with command-line
//! overrides. Lists are comma-separated; `#` starts a comment line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    pub entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "config line {}: expected 'key = value', got '{line}'",
                    i + 1
                )));
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(RawConfig { entries })
    }

    pub fn set_if(&mut self, key: &str, value: Option<String>) {
        if let Some(v) = value {
            self.entries.insert(key.to_string(), v);
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn string(&self, key: &str) -> Option<String> {
        self.get(key).map(str::to_string)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        self.get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| CliError::Config(format!("{key}: cannot parse '{v}' as a number")))
            })
            .transpose()
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>, CliError> {
        self.get(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| CliError::Config(format!("{key}: cannot parse '{v}' as an integer")))
            })
            .transpose()
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>, CliError> {
        self.get(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{key}: cannot parse '{v}' as an integer")))
            })
            .transpose()
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        self.get(key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                other => Err(CliError::Config(format!("{key}: expected a boolean, got '{other}'"))),
            })
            .transpose()
    }

    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim().parse::<f64>().map_err(|_| {
                            CliError::Config(format!("{key}: cannot parse '{s}' in list"))
                        })
                    })
                    .collect::<Result<Vec<f64>, _>>()
            })
            .transpose()
    }

    pub fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim().parse::<usize>().map_err(|_| {
                            CliError::Config(format!("{key}: cannot parse '{s}' in list"))
                        })
                    })
                    .collect::<Result<Vec<usize>, _>>()
            })
            .transpose()
    }

    /// Stable content hash of the merged configuration (FNV-1a over the
    /// canonical `key=value` lines).
    pub fn content_hash(&self) -> String {
        let mut hash: u64 = 0xcbf29ce484222325;
        for (k, v) in &self.entries {
            for byte in k.bytes().chain("=".bytes()).chain(v.bytes()).chain("\n".bytes()) {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
        format!("{hash:016x}")
    }
}

/// Load the optional config file and apply CLI overrides on top.
pub fn merged(config_path: Option<&Path>, overrides: Vec<(&'static str, Option<String>)>) -> Result<RawConfig, CliError> {
    let mut cfg = match config_path {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::default(),
    };
    for (key, value) in overrides {
        cfg.set_if(key, value);
    }
    Ok(cfg)
}
