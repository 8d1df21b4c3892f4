//! Config files: a JSON object whose keys are the subcommand's long flag
//! names. Flags given on the command line win over the file.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::usage;

pub fn load(path: Option<&Path>) -> anyhow::Result<Option<Map<String, Value>>> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(Some(map)),
        Ok(_) => Err(usage(format!("config {} must hold a JSON object", path.display()))),
        Err(e) => Err(usage(format!("config {}: {e}", path.display()))),
    }
}

/// Overlays the flags that were given onto the config file entries.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: T, file: Option<&Map<String, Value>>) -> anyhow::Result<T> {
    let Some(file) = file else { return Ok(flags) };
    let Value::Object(given) = serde_json::to_value(&flags)? else {
        unreachable!("argument structs serialize to objects")
    };
    let mut merged = file.clone();
    for (k, v) in given {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    let known = serde_json::to_value(&flags)?;
    if let Some(key) = file.keys().find(|k| known.get(k.as_str()).is_none()) {
        return Err(usage(format!("config: unknown key `{key}`")));
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(rename_all = "kebab-case")]
    struct Args {
        lr: Option<f64>,
        batch_size: Option<usize>,
    }

    fn file(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn flags_win_over_file() {
        let f = file(serde_json::json!({"lr": 0.5, "batch-size": 8}));
        let got = resolve(Args { lr: Some(0.1), batch_size: None }, Some(&f)).unwrap();
        assert_eq!(got, Args { lr: Some(0.1), batch_size: Some(8) });
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let f = file(serde_json::json!({"learning-rate": 0.5}));
        let err = resolve(Args { lr: None, batch_size: None }, Some(&f)).unwrap_err();
        assert!(err.is::<crate::Usage>());
    }
}
