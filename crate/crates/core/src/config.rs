//! Run configuration files: JSON text, environment overrides, and the
//! canonical fingerprint used to name output directories.

use std::fs;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::train::RunConfig;

/// Environment variable prefix for overrides. `MTLMAD_A__B=v` sets the key
/// path `a.b`; the value is parsed as JSON and falls back to a string.
pub const ENV_PREFIX: &str = "MTLMAD_";

/// Applies `(name, value)` overrides whose name carries [`ENV_PREFIX`].
pub fn apply_overrides<I>(root: &mut Value, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let path: Vec<String> = name[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::config(name, "empty key segment"));
        }
        let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        let mut node = &mut *root;
        for (i, key) in path.iter().enumerate() {
            let obj = match node {
                Value::Object(m) => m,
                other => {
                    *other = Value::Object(Default::default());
                    other.as_object_mut().expect("just made an object")
                }
            };
            if i + 1 == path.len() {
                obj.insert(key.clone(), parsed.clone());
                break;
            }
            node = obj.entry(key.clone()).or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Deserializes a config value, reporting the failing key path.
pub fn from_value(value: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        Error::config(if field == "." { "<root>".to_owned() } else { field }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and validates a config file, applying process-environment overrides.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    load_config_with_env(path, std::env::vars())
}

pub fn load_config_with_env<I>(path: &Path, vars: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| Error::config("<root>", e.to_string()))?;
    apply_overrides(&mut value, vars)?;
    let cfg = from_value(value)?;
    resolve_relative(cfg, path.parent().unwrap_or(Path::new(".")))
}

/// Makes data and output paths relative to the config file's directory.
fn resolve_relative(mut cfg: RunConfig, base: &Path) -> Result<RunConfig> {
    let fix = |p: &mut std::path::PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    let d = &mut cfg.data;
    for p in [&mut d.train, &mut d.val, &mut d.test, &mut d.pseudo_dir, &mut d.external_gen]
        .into_iter()
        .flatten()
    {
        fix(p);
    }
    fix(&mut cfg.output_dir);
    Ok(cfg)
}

/// Hex digest of the canonical config text, ignoring seeds and the output
/// directory so that every seed of a config shares one directory.
pub fn fingerprint(cfg: &RunConfig) -> Result<String> {
    let mut v = serde_json::to_value(cfg)?;
    if let Value::Object(m) = &mut v {
        m.remove("seeds");
        m.remove("output_dir");
    }
    let text = serde_json::to_string(&v)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_nested_keys() {
        let mut v = serde_json::json!({"model": {"encoder": {"depth": 4}}});
        apply_overrides(
            &mut v,
            [
                ("MTLMAD_MODEL__ENCODER__DEPTH".to_owned(), "2".to_owned()),
                ("MTLMAD_OUTPUT_DIR".to_owned(), "runs".to_owned()),
                ("OTHER".to_owned(), "x".to_owned()),
            ],
        )
        .unwrap();
        assert_eq!(v["model"]["encoder"]["depth"], 2);
        assert_eq!(v["output_dir"], "runs");
        assert!(v.get("other").is_none());
    }

    #[test]
    fn unknown_field_reports_path() {
        let v = serde_json::json!({"model": {"encoder": {"dpeth": 4}}});
        match from_value(v) {
            Err(Error::Config { field, .. }) => assert!(field.starts_with("model.encoder"), "{field}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fingerprint_ignores_seeds() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seeds = vec![9];
        assert_eq!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
        b.batch_size = 3;
        assert_ne!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
    }
}
