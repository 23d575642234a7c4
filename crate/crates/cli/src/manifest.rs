use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "FIDELITY_LAB_SEED";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

/// Record of one command invocation, written before work starts and finalized at
/// the end.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Fully resolved configuration; feeding this file back through `--config`
    /// reproduces the run.
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failing_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub results: Value,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start<C: Serialize>(
        command: &str,
        config: &C,
        seed: Option<u64>,
        inputs: Vec<PathBuf>,
    ) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            inputs,
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: None,
            status: RunStatus::Running,
            failing_step: None,
            error: None,
            results: Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    pub fn complete(&mut self, dir: &Path, results: Value) -> CliResult<()> {
        self.finished_unix = Some(now());
        self.status = RunStatus::Completed;
        self.results = results;
        self.write(dir)
    }

    /// Records the failure; a secondary write error is dropped in favour of `err`.
    pub fn fail(&mut self, dir: &Path, err: &CliError) {
        self.finished_unix = Some(now());
        self.status = RunStatus::Failed;
        self.failing_step = err.failing_step;
        self.error = Some(err.message.clone());
        let _ = self.write(dir);
    }
}

/// Requires an existing output directory.
pub fn output_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::io(path, "output directory does not exist"))
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(
        path,
        &(serde_json::to_string_pretty(value).expect("value serializes") + "\n"),
    )
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::schema(format!("{}: {e}", path.display())))
}

/// Loads a config file as JSON. A `.json` file with a `config` key (a manifest) yields
/// that key; other `.json` files are used whole; anything else is parsed as TOML.
fn load_file(path: &Path) -> CliResult<Value> {
    let text = read_text(path)?;
    let bad = |e: String| CliError::config(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        let mut v: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if let Some(c) = v.get_mut("config") {
            return Ok(c.take());
        }
        Ok(v)
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        serde_json::to_value(t).map_err(|e| bad(e.to_string()))
    }
}

/// Resolves defaults, then the config file, then the seed environment variable if the
/// file left the seed unset. Flags are applied by the caller afterwards.
pub fn resolve<T: DeserializeOwned + Default + Serialize>(
    file: Option<&Path>,
    seed_key: &[&str],
) -> CliResult<T> {
    let mut v = match file {
        Some(p) => load_file(p)?,
        None => serde_json::to_value(T::default()).expect("default serializes"),
    };
    if !v.is_object() {
        return Err(CliError::config("config must be a table"));
    }
    let has_seed = file.is_some() && seed_key.iter().try_fold(&v, |cur, k| cur.get(k)).is_some();
    if !has_seed {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("{SEED_ENV}={raw} is not a u64")))?;
            let mut cur = &mut v;
            for (i, k) in seed_key.iter().enumerate() {
                let obj = cur
                    .as_object_mut()
                    .ok_or_else(|| CliError::config(format!("`{k}` must be a table")))?;
                let next = if i + 1 == seed_key.len() {
                    Value::from(seed)
                } else {
                    Value::Object(Default::default())
                };
                cur = obj.entry(k.to_string()).or_insert(next);
            }
            *cur = Value::from(seed);
        }
    }
    serde_json::from_value(v).map_err(|e| CliError::config(format!("invalid configuration: {e}")))
}
