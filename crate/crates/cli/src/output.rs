//! Artifact writing with a manifest of everything a command produced.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct Artifact {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    artifacts: Vec<Artifact>,
}

pub struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    pub fn create(root: PathBuf) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root,
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> anyhow::Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let p = self.path(rel)?;
        std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.files.push(p.clone());
        Ok(p)
    }

    /// Registers a file some other routine wrote under the root.
    pub fn record(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    /// Writes `manifest.json` listing every recorded file.
    pub fn finish(mut self, command: &str, config_hash: &str) -> anyhow::Result<PathBuf> {
        self.files.sort();
        self.files.dedup();
        let mut artifacts = Vec::new();
        for f in &self.files {
            let bytes = std::fs::read(f).with_context(|| format!("reading {}", f.display()))?;
            let rel = f.strip_prefix(&self.root).unwrap_or(f);
            artifacts.push(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            command,
            config_hash,
            artifacts,
        };
        let path = self.root.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
