//! Flat key-value run configuration files.
//!
//! Format: one `key = value` pair per line, `#` comments, blank lines
//! ignored, and `include <relative-path>` pulls in another file in place
//! (later assignments win). Values stay strings until a typed getter parses
//! them, so unknown keys survive a round trip of `render`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("include cycle through {0}")]
    IncludeCycle(String),
    #[error("key `{key}`: expected {expected}, got `{value}`")]
    BadValue {
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut stack = Vec::new();
        cfg.load_into(path, &mut stack)?;
        Ok(cfg)
    }

    fn load_into(&mut self, path: &Path, stack: &mut Vec<PathBuf>) -> Result<(), ConfigError> {
        let canonical = path
            .canonicalize()
            .map_err(|e| ConfigError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        if stack.contains(&canonical) {
            return Err(ConfigError::IncludeCycle(path.display().to_string()));
        }
        stack.push(canonical.clone());
        let text = std::fs::read_to_string(&canonical)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("include ") {
                let target = canonical
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join(rest.trim());
                self.load_into(&target, stack)?;
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected `key = value` or `include <path>`".into(),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: "empty key".into(),
                });
            }
            self.values
                .insert(key.to_string(), value.trim().to_string());
        }
        stack.pop();
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    fn typed<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                expected,
                value: v.clone(),
            }),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.typed(key, "a number")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        self.typed(key, "a non-negative integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.typed(key, "a non-negative integer")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.values.get(key).map(String::as_str) {
            None => Ok(None),
            Some("true") | Some("1") | Some("yes") => Ok(Some(true)),
            Some("false") | Some("0") | Some("no") => Ok(Some(false)),
            Some(v) => Err(ConfigError::BadValue {
                key: key.to_string(),
                expected: "a boolean",
                value: v.to_string(),
            }),
        }
    }

    /// Render the resolved configuration, sorted by key.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
