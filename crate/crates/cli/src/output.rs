//! Output directory bookkeeping: every file written through [`Outputs`] is
//! listed with its content digest in a per-command manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hdmap::config::content_digest;
use hdmap::Result;
use serde::Serialize;
use serde_json::Value;

pub struct Outputs {
    dir: PathBuf,
    config_hash: String,
    files: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    files: &'a BTreeMap<String, String>,
}

impl Outputs {
    pub fn new(dir: &Path, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            files: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.insert(name.to_string(), content_digest(bytes));
        Ok(path)
    }

    /// Serializes `value` with a top-level `config_hash` field added.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut v = serde_json::to_value(value)?;
        if let Value::Object(m) = &mut v {
            m.insert("config_hash".into(), Value::String(self.config_hash.clone()));
        }
        let text = serde_json::to_string_pretty(&v)? + "\n";
        self.write(name, text.as_bytes())
    }

    /// Records a file some other routine already wrote.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let bytes = fs::read(self.path(name))?;
        self.files.insert(name.to_string(), content_digest(&bytes));
        Ok(())
    }

    pub fn finish(self, command: &str) -> Result<()> {
        let m = Manifest {
            command,
            config_hash: &self.config_hash,
            files: &self.files,
        };
        let text = serde_json::to_string_pretty(&m)? + "\n";
        fs::write(self.dir.join(format!("manifest-{command}.json")), text)?;
        Ok(())
    }
}

/// Appends a `config_hash` column to a CSV table.
pub fn with_hash_column(csv: &str, hash: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        out.push_str(line);
        out.push(',');
        out.push_str(if i == 0 { "config_hash" } else { hash });
        out.push('\n');
    }
    out
}
