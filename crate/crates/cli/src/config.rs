//! TOML run configuration. Each section overrides the matching library
//! configuration field by field; command-line flags are applied afterwards.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const SECTIONS: [&str; 4] = ["dataset", "network", "training", "eval"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    table: toml::Table,
}

fn config_error(msg: String) -> CliError {
    CliError::Core(wsod_core::Error::Config(msg))
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let table: toml::Table = text.parse().map_err(|e| config_error(format!("{origin}: {e}")))?;
        for (key, value) in &table {
            if !SECTIONS.contains(&key.as_str()) {
                return Err(config_error(format!(
                    "{origin}: unknown section `{key}` (expected one of {})",
                    SECTIONS.join(", ")
                )));
            }
            if !value.is_table() {
                return Err(config_error(format!("{origin}: `{key}` must be a table")));
            }
        }
        Ok(ConfigFile { table })
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    /// Whether `[section]` sets the field at `path`.
    pub fn sets(&self, section: &str, path: &[&str]) -> bool {
        let mut node = self.table.get(section);
        for key in path {
            node = node.and_then(|v| v.get(key));
        }
        node.is_some()
    }

    /// `base` with the fields of `[section]` replaced.
    pub fn apply<T: Serialize + DeserializeOwned>(&self, section: &str, base: T) -> CliResult<T> {
        let Some(overrides) = self.table.get(section) else {
            return Ok(base);
        };
        let mut value = toml::Value::try_from(&base).map_err(|e| config_error(format!("[{section}]: {e}")))?;
        merge(&mut value, overrides);
        value
            .try_into()
            .map_err(|e: toml::de::Error| config_error(format!("[{section}]: {}", e.message())))
    }
}

fn merge(base: &mut toml::Value, overrides: &toml::Value) {
    match (base, overrides) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Canonical JSON of a configuration value.
pub fn echo<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("configuration serializes")
}
