//! JSON dataset manifests.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub domain: String,
    #[serde(default, rename = "class", skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub root: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        manifest.check_unique()?;
        Ok(manifest)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::Manifest(format!("duplicate image path {}", e.path)));
            }
        }
        Ok(())
    }

    /// Distinct domain labels, sorted.
    pub fn domains(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.domain.as_str()).collect()
    }

    /// Distinct class labels, sorted.
    pub fn classes(&self) -> BTreeSet<&str> {
        self.entries.iter().filter_map(|e| e.class.as_deref()).collect()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        Path::new(&self.root).join(rel)
    }

    /// Sub-manifest holding the entries of one domain, in file order.
    pub fn filter_domain(&self, domain: &str) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| e.domain == domain).cloned().collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Reads a manifest; a relative `root` resolves against the manifest's directory.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = DatasetManifest::from_json(&text)?;
    if Path::new(&manifest.root).is_relative() {
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.root = base.join(&manifest.root).to_string_lossy().into_owned();
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries_in_order() {
        let m = DatasetManifest::from_json(
            r#"{"root": "/data", "entries": [
                {"path": "a.png", "domain": "A", "class": "mug"},
                {"path": "b.png", "domain": "W", "mask": "b_mask.png"}
            ]}"#,
        )
        .unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].path, "a.png");
        assert_eq!(m.entries[1].mask.as_deref(), Some("b_mask.png"));
        assert_eq!(m.domains().len(), 2);
        assert_eq!(m.resolve("a.png"), PathBuf::from("/data/a.png"));
    }

    #[test]
    fn rejects_duplicates_and_unknown_fields() {
        let err = DatasetManifest::from_json(
            r#"{"root": ".", "entries": [
                {"path": "x/1.png", "domain": "A"},
                {"path": "x/1.png", "domain": "W"}
            ]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("x/1.png"));

        assert!(DatasetManifest::from_json(
            r#"{"root": ".", "entries": [{"path": "a", "domain": "A", "label": "z"}]}"#
        )
        .is_err());
        assert!(DatasetManifest::from_json("{not json").is_err());
    }

    #[test]
    fn empty_manifest_is_valid() {
        let m = DatasetManifest::from_json(r#"{"root": ".", "entries": []}"#).unwrap();
        assert!(m.entries.is_empty());
    }

    #[test]
    fn relative_root_resolves_against_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, r#"{"root": "imgs", "entries": []}"#).unwrap();
        let m = parse_manifest(&p).unwrap();
        assert_eq!(PathBuf::from(&m.root), dir.path().join("imgs"));
    }
}
