//! Layered run configuration: a TOML or JSON file, then command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Parses a config file into a JSON value. `.json` files are JSON; anything
/// else is TOML.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value: Value = if is_json {
        serde_json::from_str(&text).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?
    };
    if !value.is_object() {
        return Err(Error::config("<file>", "top level must be a table"));
    }
    Ok(value)
}

/// Deserializes `value`, reporting the key path of the first bad entry.
pub fn from_value<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
    })
}

/// File values with every non-null entry of `flags` written over them.
pub fn layered<T: DeserializeOwned>(file: Option<&Path>, flags: Value) -> Result<T> {
    let mut merged = match file {
        Some(p) => read_config_file(p)?,
        None => Value::Object(Map::new()),
    };
    let table = merged.as_object_mut().expect("checked above");
    if let Value::Object(flags) = flags {
        for (k, v) in flags {
            if !v.is_null() {
                table.insert(k, v);
            }
        }
    }
    from_value(merged)
}
