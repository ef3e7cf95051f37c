//! Writing and locating files in the output directory.
//!
//! JSON artifacts carry `config_hash` and `seed` fields. CSV tables and
//! checkpoints are covered by `manifest.json`, which lists every file in
//! the directory with its SHA-256 and carries the same two stamps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory plus the stamps every artifact carries.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub config_hash: String,
    pub seed: u64,
}

impl Artifacts {
    pub fn create(dir: PathBuf, config_hash: String, seed: u64) -> Result<Self, Failure> {
        fs::create_dir_all(&dir).map_err(|e| Failure::io(format!("creating {}: {e}", dir.display())))?;
        Ok(Self { dir, config_hash, seed })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of an artifact an earlier command must have produced.
    pub fn require(&self, name: &str, producer: &str) -> Result<PathBuf, Failure> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Failure::io(format!("missing {}; run `{producer}` first", p.display())))
        }
    }

    /// `value` as a JSON object with `config_hash` and `seed` added.
    pub fn stamp<T: Serialize + ?Sized>(&self, value: &T) -> Result<Value, Failure> {
        let mut map = match serde_json::to_value(value).map_err(|e| Failure::config(e.to_string()))? {
            Value::Object(m) => m,
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        map.insert("config_hash".into(), json!(self.config_hash));
        map.insert("seed".into(), json!(self.seed));
        Ok(Value::Object(map))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<(), Failure> {
        let v = self.stamp(value)?;
        hessquant::analysis::write_json(&self.path(name), &v).map_err(Failure::from)
    }

    /// One stamped JSON object per line.
    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<(), Failure> {
        let mut out = String::new();
        for r in rows {
            out.push_str(&self.stamp(r)?.to_string());
            out.push('\n');
        }
        fs::write(self.path(name), out).map_err(|e| Failure::io(format!("writing {name}: {e}")))
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&self, name: &str, producer: &str) -> Result<T, Failure> {
        let p = self.require(name, producer)?;
        let bytes = fs::read(&p)?;
        serde_json::from_slice(&bytes).map_err(|e| Failure::io(format!("parsing {}: {e}", p.display())))
    }

    /// Rewrites `manifest.json` from the current directory contents.
    pub fn write_manifest(&self) -> Result<(), Failure> {
        let entries = list_files(&self.dir)?
            .into_iter()
            .filter(|rel| rel != MANIFEST)
            .map(|rel| {
                let bytes = fs::read(self.dir.join(&rel))?;
                Ok(json!({ "path": rel, "bytes": bytes.len(), "sha256": sha256_hex(&bytes) }))
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        self.write_json(MANIFEST, &json!({ "artifacts": entries }))
    }
}

/// Relative paths of every regular file under `root`, `/`-separated and
/// sorted.
pub fn list_files(root: &Path) -> Result<Vec<String>, Failure> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), Failure> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walked path is under root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}
