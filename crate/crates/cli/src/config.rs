use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST: &str = "manifest.json";

/// Resolved configuration of one run, enough to repeat it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: Value,
}

/// Loads a command configuration: built-in defaults overlaid by `path`.
///
/// The file may hold the configuration itself or a manifest written by an
/// earlier run of the same command.
pub fn load<T: DeserializeOwned + Default>(command: &str, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let config = match value.get("command") {
        Some(Value::String(c)) if c == command => value.get("config").cloned().unwrap_or(Value::Null),
        Some(other) => bail!("{} is a manifest for {other}, not {command}", path.display()),
        None => value,
    };
    serde_json::from_value(config).with_context(|| format!("invalid {command} configuration in {}", path.display()))
}

pub fn write_manifest<T: Serialize>(out: &Path, command: &str, config: &T) -> Result<()> {
    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(config)?,
    };
    write_text(&out.join(MANIFEST), &format!("{}\n", serde_json::to_string_pretty(&manifest)?))
}

/// Absolute form of an existing path.
pub fn resolve(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).with_context(|| format!("cannot resolve {}", path.display()))
}

pub fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Overwrites configuration fields with the flags that were given.
macro_rules! overlay {
    ($cfg:expr, $args:expr; $($field:ident),* $(,)?) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}
pub(crate) use overlay;

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Demo {
        a: u32,
        b: String,
    }

    #[test]
    fn file_overlays_defaults_and_manifests_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("c.json");
        fs::write(&plain, r#"{"a": 3}"#).unwrap();
        let d: Demo = load("x", Some(&plain)).unwrap();
        assert_eq!(d, Demo { a: 3, b: String::new() });

        write_manifest(dir.path(), "x", &Demo { a: 5, b: "q".into() }).unwrap();
        let m: Demo = load("x", Some(&dir.path().join(MANIFEST))).unwrap();
        assert_eq!(m, Demo { a: 5, b: "q".into() });
        assert!(load::<Demo>("y", Some(&dir.path().join(MANIFEST))).is_err());
        assert_eq!(load::<Demo>("x", None).unwrap(), Demo::default());
    }

    #[test]
    fn flags_win_over_file() {
        struct Args {
            a: Option<u32>,
            b: Option<String>,
        }
        let mut d = Demo { a: 1, b: "file".into() };
        overlay!(d, Args { a: Some(9), b: None }; a, b);
        assert_eq!(d, Demo { a: 9, b: "file".into() });
    }
}
