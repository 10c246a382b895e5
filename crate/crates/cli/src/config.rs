//! Config files, dotted overrides and the effective-config echo.

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use std::path::Path;

/// Load `T` from a TOML file (or its defaults) and apply `key.path=value`
/// overrides. Unknown keys are rejected both in the file and in overrides.
pub fn resolve<T>(file: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let base: T = match file {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => T::default(),
    };
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut tree = serde_json::to_value(&base)?;
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    serde_json::from_value(tree).context("applying overrides")
}

fn parse_value(raw: &str) -> Value {
    // Anything that is not a TOML literal is taken as a bare string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not key=value"))?;
    let mut node = tree;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => bail!("`{}` is not a table", keys[..i].join(".")),
        };
        node = obj
            .get_mut(*key)
            .ok_or_else(|| anyhow!("unknown config key `{path}`"))?;
    }
    *node = parse_value(raw);
    Ok(())
}

/// Write `effective_config.json` into `out`.
pub fn echo<T: Serialize>(out: &Path, command: &str, config: &T) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let doc = serde_json::json!({ "command": command, "config": config });
    std::fs::write(
        out.join("effective_config.json"),
        serde_json::to_string_pretty(&doc)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use splatpose::trainer::TrainConfig;

    #[test]
    fn overrides_typed_values() {
        let cfg: TrainConfig = resolve(
            None,
            &[
                "steps=12".into(),
                "loss.w_reproj=0.25".into(),
                "model.variant=v2l".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.steps, 12);
        assert_eq!(cfg.loss.w_reproj, 0.25);
        assert_eq!(cfg.model.variant, splatpose::netcore::Variant::Unified);
    }

    #[test]
    fn unknown_override_key_fails() {
        let err = resolve::<TrainConfig>(None, &["model.depth=3".into()]).unwrap_err();
        assert!(err.to_string().contains("model.depth"));
        assert!(resolve::<TrainConfig>(None, &["steps".into()]).is_err());
        assert!(resolve::<TrainConfig>(None, &["steps.x=1".into()]).is_err());
    }

    #[test]
    fn wrong_type_fails() {
        assert!(resolve::<TrainConfig>(None, &["steps=fast".into()]).is_err());
    }

    #[test]
    fn unknown_file_key_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "steps = 3\nwarmup = 10\n").unwrap();
        assert!(resolve::<TrainConfig>(Some(&p), &[]).is_err());
        std::fs::write(&p, "steps = 3\n[model]\nchannels = 16\n").unwrap();
        let cfg: TrainConfig = resolve(Some(&p), &["steps=4".into()]).unwrap();
        assert_eq!((cfg.steps, cfg.model.channels), (4, 16));
    }
}
