//! Run manifests: every subcommand records what it was asked to do and what
//! it produced, so a run can be audited or replayed with `relit rerun`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use relit_core::{RelitError, Result};

/// Audit record written next to a subcommand's outputs.
///
/// `argv` is the full command line as executed (including the binary name);
/// replaying it from the same working directory reproduces the outputs
/// byte for byte. `wall_time_secs` is informational and is the one field
/// expected to differ between otherwise identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub toolkit_version: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Snapshot of the parsed flags for this subcommand.
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
}

fn default_schema_version() -> u32 {
    1
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl RunManifest {
    /// Write atomically (temp file + rename) as `manifest.json` in `dir`.
    pub fn write_atomic(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let tmp = dir.join(".manifest.json.tmp");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&tmp, text)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| RelitError::Parse {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        if manifest.argv.is_empty() {
            return Err(RelitError::Parse {
                path: path.display().to_string(),
                detail: "manifest has an empty argv".into(),
            });
        }
        Ok(manifest)
    }
}
