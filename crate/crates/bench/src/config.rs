//! key=value configuration with environment overrides.
//!
//! A config file holds one `key=value` pair per line; `#` starts a
//! comment. Any key can be overridden by an environment variable named
//! `VBLOB_<KEY>` (upper-cased, `-`/`.` mapped to `_`), e.g.
//! `VBLOB_VERSIONER=127.0.0.1:7001`.

use std::collections::HashMap;
use std::path::Path;

use vblob_core::client::Endpoints;
use vblob_core::{Error, Result};

pub const ENV_PREFIX: &str = "VBLOB_";

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: HashMap<String, String>,
}

impl Config {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Connection(format!("read {path:?}: {e}")))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Malformed(format!(
                    "config line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    fn env_key(key: &str) -> String {
        let mut out = String::from(ENV_PREFIX);
        for c in key.chars() {
            out.push(match c {
                '-' | '.' => '_',
                c => c.to_ascii_uppercase(),
            });
        }
        out
    }

    /// Environment first, file second.
    pub fn get(&self, key: &str) -> Option<String> {
        std::env::var(Self::env_key(key))
            .ok()
            .or_else(|| self.values.get(key).cloned())
    }

    /// Service endpoints from keys `versioner`, `allocator` and
    /// `metastores` (comma-separated, order significant).
    pub fn endpoints(&self) -> Result<Endpoints> {
        let need = |key: &str| {
            self.get(key).ok_or_else(|| {
                Error::Malformed(format!(
                    "missing endpoint: set {key}= in the config or {}",
                    Self::env_key(key)
                ))
            })
        };
        let metastores: Vec<String> = need("metastores")?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if metastores.is_empty() {
            return Err(Error::Malformed("metastores list is empty".into()));
        }
        Ok(Endpoints {
            versioner: need("versioner")?,
            allocator: need("allocator")?,
            metastores,
        })
    }
}
