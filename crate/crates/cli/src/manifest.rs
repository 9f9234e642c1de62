//! Per-run provenance record.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const GIT_DESCRIBE: &str = env!("VDA_GIT_DESCRIBE");

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of the effective configuration as canonical JSON.
    pub config_hash: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub git_describe: String,
    pub outputs: Vec<String>,
    pub started_unix_secs: u64,
    pub wall_time_secs: f64,
}

/// Compact JSON with object keys sorted. `serde_json::Map` is ordered by key
/// unless `preserve_order` is enabled, and float formatting is shortest
/// round-trip, so the text is the same on every platform.
pub fn canonical_json(v: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                Value::Object(
                    keys.into_iter()
                        .map(|k| (k.clone(), sorted(&m[k])))
                        .collect(),
                )
            }
            Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    sorted(v).to_string()
}

pub fn config_hash(v: &Value) -> String {
    Sha256::digest(canonical_json(v).as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Collects what a run produced and writes the manifest when it finishes.
pub struct Recorder {
    command: String,
    args: Vec<String>,
    started: Instant,
    started_unix: u64,
    config: Value,
    seed: Option<u64>,
    outputs: Vec<String>,
}

impl Recorder {
    pub fn start(command: &str, args: Vec<String>) -> Self {
        Recorder {
            command: command.into(),
            args,
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config: Value::Null,
            seed: None,
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, config: Value, seed: Option<u64>) {
        self.config = config;
        self.seed = seed;
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(self, dest: &Path) -> Result<()> {
        let m = RunManifest {
            config_hash: config_hash(&self.config),
            command: self.command,
            args: self.args,
            config: self.config,
            seed: self.seed,
            git_describe: GIT_DESCRIBE.into(),
            outputs: self.outputs,
            started_unix_secs: self.started_unix,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        write_atomic(dest, (serde_json::to_string_pretty(&m)? + "\n").as_bytes())
    }
}

/// `<dir>/run_manifest.json` for directory outputs.
pub fn for_dir(dir: &Path) -> PathBuf {
    dir.join("run_manifest.json")
}

/// `<file>.manifest.json` for single-file outputs.
pub fn for_file(file: &Path) -> PathBuf {
    let mut name = file
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f =
            std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn canonical_form_ignores_key_order() {
        let a = json!({"b": 1, "a": {"y": [1.5, 2], "x": null}});
        let b: Value = serde_json::from_str(r#"{"a":{"x":null,"y":[1.5,2]},"b":1}"#).unwrap();
        assert_eq!(canonical_json(&a), r#"{"a":{"x":null,"y":[1.5,2]},"b":1}"#);
        assert_eq!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn hash_is_sha256_hex() {
        // sha256("null")
        assert_eq!(
            config_hash(&Value::Null),
            "74234e98afe7498fb5daf1f36ac2d78acc339464f950703b8c019892f982b90b"
        );
    }

    #[test]
    fn manifest_paths() {
        assert_eq!(
            for_file(Path::new("out/r.json")),
            Path::new("out/r.json.manifest.json")
        );
        assert_eq!(
            for_dir(Path::new("run")),
            Path::new("run/run_manifest.json")
        );
    }
}
