//! Layered command settings and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Bad flags or config files; reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Explicitly given command-line values, keyed like the settings struct.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("plain value"));
        }
        self
    }

    pub fn flag(&mut self, key: &str, on: bool, value: bool) -> &mut Self {
        if on {
            self.0.insert(key.to_string(), Value::Bool(value));
        }
        self
    }
}

/// Settings from defaults, then the JSON config file, then explicit flags.
pub fn resolve<T>(config: Option<&Path>, overrides: Overrides) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let Value::Object(mut merged) = serde_json::to_value(T::default())? else {
        unreachable!("settings serialize to a JSON object");
    };
    if let Some(path) = config {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(file) = file else {
            bail!(UsageError(format!("config {} must hold a JSON object", path.display())));
        };
        overlay(&mut merged, file)?;
    }
    overlay(&mut merged, overrides.0)?;
    serde_json::from_value(Value::Object(merged)).map_err(|e| UsageError(format!("invalid settings: {e}")).into())
}

fn overlay(base: &mut Map<String, Value>, top: Map<String, Value>) -> Result<()> {
    for (k, v) in top {
        match base.get_mut(&k) {
            None => bail!(UsageError(format!("unknown setting {k:?}"))),
            Some(Value::Object(inner)) if v.is_object() => {
                let Value::Object(v) = v else { unreachable!() };
                overlay(inner, v)?;
            }
            Some(slot) => *slot = v,
        }
    }
    Ok(())
}

/// `manifest.json` written once a command has finished.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<PathBuf>,
}

pub struct Run {
    command: &'static str,
    started_at: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl Run {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            started_at: now(),
        }
    }

    /// Writes `dir/manifest.json` via a temporary file and rename.
    pub fn finish<S: Serialize>(self, dir: &Path, settings: &S, seed: Option<u64>, outputs: Vec<PathBuf>) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: serde_json::to_value(settings)?,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: now(),
            outputs,
        };
        fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        let tmp = dir.join(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
