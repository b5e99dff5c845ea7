//! Run context: output directory resolution, worker pool sizing, manifest
//! reading/writing, and small typed accessors over manifest documents.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::Value;

use crate::output::{atomic_write, from_serde, Json};
use sfde_core::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct RunContext {
    out_dir: PathBuf,
    threads: Option<usize>,
}

impl RunContext {
    /// Resolve the output directory (relative paths land under
    /// `SFDE_OUT_DIR` when that is set) and the worker count (flag first,
    /// then `SFDE_THREADS`).
    pub fn new(out: PathBuf, threads: Option<usize>) -> Result<Self> {
        let out_dir = match std::env::var_os("SFDE_OUT_DIR") {
            Some(base) if out.is_relative() => PathBuf::from(base).join(out),
            _ => out,
        };
        let threads = match threads {
            Some(n) => Some(n),
            None => match std::env::var("SFDE_THREADS") {
                Ok(text) => Some(text.parse::<usize>().map_err(|_| {
                    Error::config("SFDE_THREADS", format!("{text:?} is not a thread count"))
                })?),
                Err(_) => None,
            },
        };
        if threads == Some(0) {
            return Err(Error::config("threads", "worker count must be at least 1"));
        }
        Ok(RunContext { out_dir, threads })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn threads(&self) -> Option<usize> {
        self.threads
    }

    /// Run a command body inside a worker pool of the configured size.
    /// Results are independent of the pool size by construction
    /// (deterministic per-path streams, order-preserving collection).
    pub fn install<T: Send>(&self, body: impl FnOnce() -> T + Send) -> T {
        match self.threads {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("worker pool")
                .install(body),
            None => body(),
        }
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<String> {
        atomic_write(&self.path(name), bytes)?;
        Ok(name.to_string())
    }

    /// Write the manifest echoing the fully resolved configuration. The
    /// timestamp lives only here, so all other outputs replay bit-exactly.
    pub fn write_manifest(&self, command: &str, config: Json, outputs: &[String]) -> Result<()> {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut manifest = Json::object();
        manifest.push(
            "artifact_version",
            Json::Str(env!("CARGO_PKG_VERSION").to_string()),
        );
        manifest.push("created_at_unix", Json::Uint(created));
        manifest.push("command", Json::Str(command.to_string()));
        manifest.push("config", config);
        manifest.push(
            "outputs",
            Json::Array(outputs.iter().map(|o| Json::Str(o.clone())).collect()),
        );
        self.write(MANIFEST_FILE, manifest.render().as_bytes())?;
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("manifest", format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config("manifest", format!("invalid JSON: {e}")))
}

// typed accessors with key paths for manifest/config documents

pub fn get<'v>(value: &'v Value, path: &str) -> Result<&'v Value> {
    let mut current = value;
    for key in path.split('.') {
        current = current
            .get(key)
            .ok_or_else(|| Error::config(path, "missing required field"))?;
    }
    Ok(current)
}

pub fn get_f64(value: &Value, path: &str) -> Result<f64> {
    get(value, path)?
        .as_f64()
        .ok_or_else(|| Error::config(path, "expected a number"))
}

pub fn get_u64(value: &Value, path: &str) -> Result<u64> {
    get(value, path)?
        .as_u64()
        .ok_or_else(|| Error::config(path, "expected a non-negative integer"))
}

pub fn get_usize(value: &Value, path: &str) -> Result<usize> {
    Ok(get_u64(value, path)? as usize)
}

pub fn get_str<'v>(value: &'v Value, path: &str) -> Result<&'v str> {
    get(value, path)?
        .as_str()
        .ok_or_else(|| Error::config(path, "expected a string"))
}

pub fn get_bool(value: &Value, path: &str) -> Result<bool> {
    get(value, path)?
        .as_bool()
        .ok_or_else(|| Error::config(path, "expected a boolean"))
}

pub fn get_f64_list(value: &Value, path: &str) -> Result<Vec<f64>> {
    get(value, path)?
        .as_array()
        .ok_or_else(|| Error::config(path, "expected an array"))?
        .iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| Error::config(path, "expected numbers"))
        })
        .collect()
}

/// Embed a parsed document into the deterministic writer tree.
pub fn echo(value: &Value) -> Json {
    from_serde(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_accessors() {
        let v: Value = serde_json::json!({"a": {"b": 2.5, "c": [1.0, 2.0]}, "s": "x", "f": true});
        assert_eq!(get_f64(&v, "a.b").unwrap(), 2.5);
        assert_eq!(get_f64_list(&v, "a.c").unwrap(), vec![1.0, 2.0]);
        assert_eq!(get_str(&v, "s").unwrap(), "x");
        assert!(get_bool(&v, "f").unwrap());
        match get_f64(&v, "a.missing") {
            Err(Error::Config { path, .. }) => assert_eq!(path, "a.missing"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn out_dir_env_resolution() {
        // no env manipulation here (tests run in parallel); relative passthrough
        let ctx = RunContext::new(PathBuf::from("/tmp/x"), Some(2)).unwrap();
        assert_eq!(ctx.out_dir(), Path::new("/tmp/x"));
        assert_eq!(ctx.threads(), Some(2));
        assert!(RunContext::new(PathBuf::from("."), Some(0)).is_err());
    }
}
