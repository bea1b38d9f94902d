use std::fs;
use std::path::Path;

use serde_json::Value;
use videosaur::TrainConfig;

use crate::error::CliError;

/// Reads an optional JSON config, applies `key=value` overrides (dotted
/// keys, JSON values; bare words are taken as strings) and validates.
pub fn load(path: Option<&Path>, sets: &[String]) -> Result<TrainConfig, CliError> {
    let value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    let origin = path.map_or_else(|| "config".to_string(), |p| p.display().to_string());
    overlay(value, sets).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{origin}: {m}")),
        e => e,
    })
}

/// Applies overrides to a JSON config value and deserializes it.
pub fn overlay(mut value: Value, sets: &[String]) -> Result<TrainConfig, CliError> {
    let known = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    for s in sets {
        apply(&mut value, &known, s)?;
    }
    let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn apply(root: &mut Value, known: &Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
    let parts: Vec<&str> = key.split('.').collect();
    let mut k = known;
    for p in &parts {
        k = k
            .get(p)
            .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
    }
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(CliError::Config(format!("config key `{key}` is not inside an object")));
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| CliError::Config(format!("config key `{key}` is not inside an object")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
