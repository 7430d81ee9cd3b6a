//! Run configuration: defaults, then the config file, then flags.

use std::path::Path;

use serde_json::Value;

use partlearn::pipeline::StageConfig;

use crate::Failure;

/// Overlay `patch` onto `base`, rejecting keys the defaults do not have.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), String> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let field = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &field)?,
                    None => return Err(format!("unknown config field `{field}`")),
                }
            }
            Ok(())
        }
        (slot, v) => {
            if slot.is_object() {
                return Err(format!("config field `{path}` must be an object"));
            }
            *slot = v;
            Ok(())
        }
    }
}

pub fn merged(file: Option<Value>, seed: Option<u64>) -> Result<StageConfig, String> {
    let mut value = serde_json::to_value(StageConfig::default()).map_err(|e| e.to_string())?;
    if let Some(patch) = file {
        if !patch.is_object() {
            return Err("config must be a JSON object".into());
        }
        merge(&mut value, patch, "")?;
    }
    if let Some(s) = seed {
        value["seed"] = s.into();
    }
    let cfg: StageConfig = serde_json::from_value(value).map_err(|e| format!("bad config value: {e}"))?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<StageConfig, Failure> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Data(anyhow::anyhow!("reading {}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?)
        }
        None => None,
    };
    merged(file, seed).map_err(Failure::Usage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_without_file() {
        assert_eq!(merged(None, None).unwrap(), StageConfig::default());
    }

    #[test]
    fn file_then_flag() {
        let cfg = merged(Some(json!({"seed": 4, "bandwidth": 0.25, "train": {"max_iterations": 7}})), Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.bandwidth, 0.25);
        assert_eq!(cfg.train.max_iterations, 7);
        assert_eq!(cfg.train.batch_size, StageConfig::default().train.batch_size);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = merged(Some(json!({"train": {"learning_rat": 0.1}})), None).unwrap_err();
        assert!(err.contains("train.learning_rat"), "{err}");
    }

    #[test]
    fn invalid_value_rejected() {
        assert!(merged(Some(json!({"bandwidth": 3.0})), None).unwrap_err().contains("bandwidth"));
        assert!(merged(Some(json!({"train": 1})), None).is_err());
    }
}
