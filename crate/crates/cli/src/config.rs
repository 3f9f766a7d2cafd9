//! `--config` files: a JSON object whose keys are flag names. Explicit flags
//! win over the file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub fn load(path: Option<&Path>) -> CliResult<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path).map_err(|source| CliError::File {
        path: path.display().to_string(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let Value::Object(map) = value else {
        return Err(CliError::Config {
            path: path.display().to_string(),
            detail: "top level must be an object".into(),
        });
    };
    // flag spelling and field spelling are both accepted
    Ok(map.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect())
}

/// Overlays the flags given on the command line onto the config file.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> CliResult<T> {
    let mut merged = load(config)?;
    let Value::Object(given) = serde_json::to_value(flags).expect("flags serialize") else {
        unreachable!("argument structs serialize to objects");
    };
    for (k, v) in given {
        if !v.is_null() && !(v.is_object() && v.as_object().is_some_and(Map::is_empty)) {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config {
        path: config.map_or_else(|| "<flags>".into(), |p| p.display().to_string()),
        detail: e.to_string(),
    })
}

/// Applies `overrides` field by field to `base`.
pub fn patch<T: Serialize + DeserializeOwned>(base: &T, overrides: &Map<String, Value>, origin: &str) -> CliResult<T> {
    let Value::Object(mut fields) = serde_json::to_value(base).expect("config serializes") else {
        unreachable!("configs serialize to objects");
    };
    for (k, v) in overrides {
        fields.insert(k.clone(), v.clone());
    }
    serde_json::from_value(Value::Object(fields)).map_err(|e| CliError::Config {
        path: origin.into(),
        detail: e.to_string(),
    })
}
