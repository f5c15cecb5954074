//! Layered TOML configuration: built-in defaults, then the config file, then
//! command-line overrides.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

/// Bad input detected before any work starts. Maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// How a command treats its seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedRule {
    /// `seed` must come from the file or `--seed`.
    Required,
    /// `seed` has a default that either source may override.
    Optional,
    /// `--seed` replaces the `seeds` list with a single entry.
    List,
}

pub fn to_table<T: Serialize>(value: &T) -> anyhow::Result<Table> {
    match Value::try_from(value)? {
        Value::Table(t) => Ok(t),
        _ => anyhow::bail!("configuration does not serialize to a table"),
    }
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn read_table(path: &Path) -> anyhow::Result<Table> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| config_error(format!("config {} is not valid TOML: {e}", path.display())))
}

/// Builds the effective configuration. With `print_only` the seed default is
/// kept so the full schema can be shown.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    seed: Option<u64>,
    rule: SeedRule,
    print_only: bool,
) -> anyhow::Result<T> {
    let mut table = to_table(defaults)?;
    if rule == SeedRule::Required && !print_only {
        table.remove("seed");
    }
    if let Some(path) = file {
        merge(&mut table, read_table(path)?);
    }
    if let Some(seed) = seed {
        let seed = i64::try_from(seed).map_err(|_| config_error("seed must fit in a signed 64-bit integer"))?;
        match rule {
            SeedRule::List => table.insert("seeds".into(), Value::Array(vec![Value::Integer(seed)])),
            _ => table.insert("seed".into(), Value::Integer(seed)),
        };
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_error(format!("invalid configuration: {}", e.message())))
}

pub fn render<T: Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(toml::to_string_pretty(value)?)
}
