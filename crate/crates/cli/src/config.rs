//! Option layering: built-in defaults < TOML config file < environment <
//! flags. Clap already resolves flag-over-env; the file fills whatever is
//! still unset.
//!
//! The config file has optional top-level `runs` and one table per
//! subcommand whose keys are the long option names with `_` for `-`:
//!
//! ```toml
//! runs = "runs"
//!
//! [train]
//! dataset = "data/synth"
//! epochs = 20
//! no_augment = true
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub fn read_file(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// Merges `defaults`, the file table `section` and the set `flags`, then
/// reads the result back as `T`. Unknown file keys are usage errors.
pub fn layer<T: Serialize + DeserializeOwned>(
    section: &str,
    defaults: Value,
    file: Option<&toml::Table>,
    flags: &T,
) -> Result<T, CliError> {
    let flags = serde_json::to_value(flags).expect("options serialize");
    let Value::Object(flags) = flags else {
        unreachable!("option structs are objects")
    };
    let mut merged: Map<String, Value> = match defaults {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    if let Some(t) = file.and_then(|f| f.get(section)) {
        let toml::Value::Table(t) = t else {
            return Err(CliError::Usage(format!("config: [{section}] must be a table")));
        };
        for (k, v) in t {
            if !flags.contains_key(k) {
                return Err(CliError::Usage(format!("config: unknown key {k:?} in [{section}]")));
            }
            merged.insert(k.clone(), serde_json::to_value(v).expect("toml converts"));
        }
    }
    for (k, v) in flags {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::Usage(format!("config [{section}]: {e}")))
}
