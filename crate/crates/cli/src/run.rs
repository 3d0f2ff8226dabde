//! Run-stamped output directories and artifact writers. Every artifact
//! carries the run configuration and seed.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

pub struct RunDir {
    path: PathBuf,
    audit: serde_json::Value,
    seed: u64,
}

impl RunDir {
    /// Creates `<root>/<stamp>-<command>`, or `<root>/<name>` when a run name
    /// is given. A stamped name that already exists gets a numeric suffix.
    pub fn create(root: &Path, command: &str, name: Option<&str>, audit: serde_json::Value, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let path = match name {
            Some(n) => {
                let p = root.join(n);
                if p.exists() {
                    bail!("run directory {} already exists", p.display());
                }
                p
            }
            None => {
                let stamp = format!("{}-{command}", chrono::Local::now().format("%Y%m%d-%H%M%S"));
                let mut p = root.join(&stamp);
                let mut i = 1;
                while p.exists() {
                    p = root.join(format!("{stamp}-{i}"));
                    i += 1;
                }
                p
            }
        };
        std::fs::create_dir(&path).with_context(|| format!("creating {}", path.display()))?;
        log::info!("writing to {}", path.display());
        Ok(RunDir { path, audit, seed })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes `{"seed", "run_config", <key>: value}` as pretty JSON.
    pub fn write_json<T: Serialize>(&self, name: &str, key: &str, value: &T) -> Result<PathBuf> {
        let mut doc = serde_json::Map::new();
        doc.insert("seed".into(), self.seed.into());
        doc.insert("run_config".into(), self.audit.clone());
        doc.insert(key.into(), serde_json::to_value(value)?);
        self.write_json_value(name, serde_json::Value::Object(doc))
    }

    /// Writes an object after adding `seed` and `run_config` keys to it.
    pub fn write_json_merged<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut v = serde_json::to_value(value)?;
        let obj = v.as_object_mut().context("artifact is not a JSON object")?;
        obj.insert("seed".into(), self.seed.into());
        obj.insert("run_config".into(), self.audit.clone());
        self.write_json_value(name, v)
    }

    fn write_json_value(&self, name: &str, v: serde_json::Value) -> Result<PathBuf> {
        let p = self.file(name);
        let mut text = serde_json::to_string_pretty(&v)?;
        text.push('\n');
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    /// CSV with one leading `#` comment line holding the seed and config.
    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let p = self.file(name);
        let mut f = std::fs::File::create(&p).with_context(|| format!("writing {}", p.display()))?;
        writeln!(f, "# seed={} run_config={}", self.seed, self.audit)?;
        caecnnloc::eval::write_csv_to(&mut f, rows)?;
        Ok(p)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.file(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}
