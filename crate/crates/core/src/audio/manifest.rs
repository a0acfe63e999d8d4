//! Dataset manifests and the normalized-audio cache layout.
//!
//! A manifest is a TOML file with one `[[file]]` table per recording:
//!
//! ```toml
//! [[file]]
//! path = "raw/di_take1.wav"
//! role = "clean"          # or "rendered"
//! tone_label = "crunch"
//! source_id = "take1"     # optional, defaults to the file stem
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Role;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub role: Role,
    pub tone_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
}

impl ManifestEntry {
    pub fn source_id(&self) -> String {
        self.source_id.clone().unwrap_or_else(|| {
            self.path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, rename = "file")]
    pub files: Vec<ManifestEntry>,
}

fn safe_component(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(['/', '\\']) || s == "." || s == ".." {
        return Err(Error::Config(format!("invalid {kind} '{s}'")));
    }
    Ok(())
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        for f in &m.files {
            safe_component("tone_label", &f.tone_label)?;
            safe_component("source_id", &f.source_id())?;
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Entries with relative paths resolved against `base`.
    pub fn resolved(&self, base: &Path) -> Vec<ManifestEntry> {
        self.files
            .iter()
            .map(|f| ManifestEntry {
                path: if f.path.is_absolute() { f.path.clone() } else { base.join(&f.path) },
                ..f.clone()
            })
            .collect()
    }
}

/// `<root>/<tone_label>/<role>/<source_id>.wav`
pub fn cache_path(root: &Path, tone_label: &str, role: Role, source_id: &str) -> PathBuf {
    root.join(tone_label).join(role.as_str()).join(format!("{source_id}.wav"))
}
