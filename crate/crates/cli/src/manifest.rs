//! Run manifests: a JSON record of what a command was asked to do and
//! what it produced. Written atomically (temp file + rename) in state
//! "running" before any output appears, then rewritten as "complete" or
//! "failed", so a crash can never leave outputs without provenance.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::Failure;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub build: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config: Value,
    pub outputs: Vec<String>,
    pub status: &'static str,
    /// Wall-clock duration. Reproducibility promises byte-identical
    /// outputs *excluding* this field.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u128>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub stats: Value,
    #[serde(skip)]
    path: PathBuf,
}

impl RunManifest {
    /// Write the "running" manifest and hand back the handle that will
    /// finalize it.
    pub fn begin(
        command: &'static str,
        path: PathBuf,
        seed: Option<u64>,
        config: Value,
        outputs: &[&Path],
    ) -> Result<Self, Failure> {
        let m = RunManifest {
            command,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            build: env!("HYVIC_BUILD_ID"),
            seed,
            config,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            status: "running",
            wall_ms: None,
            stats: Value::Null,
            path,
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Failure::Other(format!("manifest serialization: {e}")))?;
        text.push('\n');
        atomic_write(&self.path, text.as_bytes())
            .map_err(|e| Failure::Other(format!("cannot write manifest {}: {e}", self.path.display())))
    }

    pub fn complete(mut self, stats: Value, wall_ms: u128) -> Result<(), Failure> {
        self.status = "complete";
        self.stats = stats;
        self.wall_ms = Some(wall_ms);
        self.write()
    }

    /// Best-effort: failure handling must not mask the original error.
    pub fn failed(mut self, error: &str) {
        self.status = "failed";
        self.stats = serde_json::json!({ "error": error });
        let _ = self.write();
    }
}

/// Write-to-temp-then-rename in the target's directory, so readers see
/// either the old bytes or the new bytes, never a torn file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().ok_or_else(|| {
        std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("path {} has no file name", path.display()),
        )
    })?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
