//! Run manifest: config snapshot plus per-stage content digests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Relative path to SHA-256 hex digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// TOML snapshot of the effective configuration.
    pub config: String,
    /// Keyed by stage name, plus a seed/variant suffix where applicable.
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn load_or_new(out: &Path, config: &str) -> Result<Self, PipelineError> {
        let path = out.join(MANIFEST_FILE);
        if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
            let mut m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| PipelineError::Corrupt(format!("{}: {e}", path.display())))?;
            if m.config != config {
                log::warn!("configuration changed since the last run; stage records from it are dropped");
                m.stages.clear();
                m.config = config.to_string();
            }
            m.tool_version = env!("CARGO_PKG_VERSION").to_string();
            Ok(m)
        } else {
            Ok(Self { tool_version: env!("CARGO_PKG_VERSION").to_string(), config: config.to_string(), stages: BTreeMap::new() })
        }
    }

    pub fn save(&self, out: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Digest of everything except wall-clock times. Two runs of the same
    /// configuration agree on this.
    pub fn content_digest(&self) -> String {
        let mut copy = self.clone();
        for s in copy.stages.values_mut() {
            s.wall_clock_ms = 0;
        }
        sha256_hex(serde_json::to_string(&copy).expect("manifest serializes").as_bytes())
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| PipelineError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| PipelineError::io(path, e))?;
    tmp.persist(path).map_err(|e| PipelineError::io(path, e.error))?;
    Ok(())
}
