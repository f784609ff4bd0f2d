use std::fs;
use std::path::Path;

use mapo_lab::experiment::ExperimentConfig;
use serde_json::Value;

use crate::error::CliError;

/// Sets `path` (dot separated) in `root` to `value`, creating intermediate objects.
pub fn set_dotted(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("malformed override path `{path}`")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| {
            CliError::Config(format!(
                "cannot set `{path}`: `{}` is not an object",
                keys[..i].join(".")
            ))
        })?;
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one key")
}

/// Parses `a.b=value`. The value is read as JSON when possible and as a bare string otherwise.
pub fn parse_override(raw: &str) -> Result<(String, Value), CliError> {
    let (path, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{raw}` is not of the form path=value")))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((path.trim().to_string(), value))
}

/// A config document after overrides, in both raw and typed form.
pub struct Resolved {
    pub value: Value,
    pub config: ExperimentConfig,
}

impl Resolved {
    /// Reads the config (or the defaults), applies overrides in order, then type-checks
    /// and validates. Schema errors name the offending field path.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize"),
        };
        for (key, v) in overrides {
            set_dotted(&mut value, key, v.clone())?;
        }
        let config: ExperimentConfig = serde_path_to_error::deserialize(value.clone()).map_err(|e| {
            let at = e.path().to_string();
            if at == "." {
                CliError::Config(e.into_inner().to_string())
            } else {
                CliError::Config(format!("at `{at}`: {}", e.into_inner()))
            }
        })?;
        config.validate()?;
        // Round-trip so the printed config lists every default explicitly.
        let value = serde_json::to_value(&config).expect("config serializes");
        Ok(Resolved { value, config })
    }

    pub fn pretty(&self) -> String {
        serde_json::to_string_pretty(&self.value).expect("value serializes")
    }
}
