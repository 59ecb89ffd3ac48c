//! Content-hash stamps for resumable stages.
//!
//! A stage writes its outputs, then a `.key` file holding the hash of
//! everything it consumed. A later run with the same key and all outputs
//! present skips the stage.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Incremental builder for a stage key. Every field is length-prefixed so
/// adjacent values cannot run together.
#[derive(Clone, Default)]
pub struct KeyBuilder {
    hasher: Sha256,
}

impl KeyBuilder {
    pub fn new(stage: &str) -> Self {
        let mut k = Self::default();
        k.push("stage", stage.as_bytes());
        k
    }

    pub fn push(&mut self, name: &str, bytes: &[u8]) -> &mut Self {
        for part in [name.as_bytes(), bytes] {
            self.hasher.update((part.len() as u64).to_le_bytes());
            self.hasher.update(part);
        }
        self
    }

    pub fn str(&mut self, name: &str, value: &str) -> &mut Self {
        self.push(name, value.as_bytes())
    }

    pub fn json(&mut self, name: &str, value: &impl serde::Serialize) -> &mut Self {
        let text = serde_json::to_string(value).expect("stage parameters serialize");
        self.push(name, text.as_bytes())
    }

    pub fn finish(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest_bytes(&bytes))
}

/// A stage's stamp file and the outputs it vouches for.
pub struct Stamp {
    pub key_file: PathBuf,
    pub key: String,
    pub outputs: Vec<PathBuf>,
}

impl Stamp {
    pub fn new(key_file: impl Into<PathBuf>, key: String) -> Self {
        Self {
            key_file: key_file.into(),
            key,
            outputs: Vec::new(),
        }
    }

    pub fn output(mut self, path: impl Into<PathBuf>) -> Self {
        self.outputs.push(path.into());
        self
    }

    pub fn is_fresh(&self) -> bool {
        match fs::read_to_string(&self.key_file) {
            Ok(stored) => stored.trim() == self.key && self.outputs.iter().all(|p| p.exists()),
            Err(_) => false,
        }
    }

    /// Removes the stamp before recomputing, so an interrupted stage is
    /// never mistaken for a finished one.
    pub fn invalidate(&self) -> Result<()> {
        match fs::remove_file(&self.key_file) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(&self.key_file, e)),
            _ => Ok(()),
        }
    }

    pub fn commit(&self) -> Result<()> {
        if let Some(dir) = self.key_file.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&self.key_file, format!("{}\n", self.key)).map_err(|e| Error::io(&self.key_file, e))
    }
}
