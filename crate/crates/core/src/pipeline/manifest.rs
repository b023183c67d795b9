use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{run_edit, EditConfig, EditStrategy, PipelineError};
use crate::denoiser::{CountingBackend, EditingBackend, MockBackend};
use crate::specifier::{AmbiguousInstruction, CaptionPair, SpecificInstructionSet};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest io ({path}): {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported manifest_version {0}, expected {MANIFEST_VERSION}")]
    Version(u32),
    #[error("cannot replay: {0}")]
    Replay(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// SHA-256 over the dimensions and raw RGB bytes.
pub fn image_digest(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
}

impl ImageRef {
    pub fn of(image: &RgbImage, path: Option<&Path>) -> Self {
        Self {
            path: path.map(|p| p.display().to_string()),
            sha256: image_digest(image),
            width: image.width(),
            height: image.height(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub id: String,
    pub downscale_factor: u32,
    pub latent_channels: usize,
    /// `sequential` or `batched`.
    pub batching: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub timestep: u32,
    pub calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_histogram: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Array2<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub encode_ms: f64,
    pub denoise_ms: f64,
    pub decode_ms: f64,
    pub total_ms: f64,
}

/// Replayable record of one edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditManifest {
    pub manifest_version: u32,
    pub input: ImageRef,
    pub instruction: String,
    pub specific_instructions: Option<SpecificInstructionSet>,
    pub instructions_used: Vec<String>,
    /// Text of the instruction-conditioned call.
    pub conditioning_text: String,
    pub strategy: EditStrategy,
    pub config: EditConfig,
    pub backend: BackendInfo,
    pub sampler: String,
    pub calls_per_step: usize,
    pub total_calls: usize,
    pub steps: Vec<StepRecord>,
    pub output: ImageRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<CaptionPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<serde_json::Value>,
    pub timings: Timings,
}

impl EditManifest {
    pub fn to_json(&self) -> Result<String, ManifestError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value
            .get("manifest_version")
            .and_then(serde_json::Value::as_u64)
            .unwrap_or(0) as u32;
        if version != MANIFEST_VERSION {
            return Err(ManifestError::Version(version));
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Writes via a temporary file in the same directory and renames it
    /// into place.
    pub fn write_atomic(&self, path: &Path) -> Result<(), ManifestError> {
        let io_err = |source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        };
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
        tmp.write_all(self.to_json()?.as_bytes()).map_err(io_err)?;
        tmp.write_all(b"\n").map_err(io_err)?;
        tmp.as_file().sync_all().map_err(io_err)?;
        tmp.persist(path).map_err(|e| io_err(e.error))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub expected_output: String,
    pub actual_output: String,
    pub expected_calls: usize,
    pub actual_calls: usize,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.expected_output == self.actual_output && self.expected_calls == self.actual_calls
    }
}

/// Re-runs a manifest on the mock backend and compares the output digest
/// and the number of denoiser calls.
pub fn replay_manifest(manifest: &EditManifest, input: &RgbImage) -> Result<ReplayReport, ManifestError> {
    if manifest.backend.id != "mock" {
        return Err(ManifestError::Replay(format!(
            "only mock-backend manifests can be replayed, got '{}'",
            manifest.backend.id
        )));
    }
    let digest = image_digest(input);
    if digest != manifest.input.sha256 {
        return Err(ManifestError::Replay(format!(
            "input digest {digest} does not match recorded {}",
            manifest.input.sha256
        )));
    }
    let backend = CountingBackend::new(
        MockBackend::new(manifest.backend.downscale_factor).map_err(|e| ManifestError::Replay(e.to_string()))?,
    );
    let c =
        AmbiguousInstruction::new(manifest.instruction.clone()).map_err(|e| ManifestError::Replay(e.to_string()))?;
    let outcome = run_edit(
        input,
        &c,
        manifest.specific_instructions.as_ref(),
        &manifest.config,
        manifest.strategy,
        &backend as &dyn EditingBackend,
    )?;
    Ok(ReplayReport {
        expected_output: manifest.output.sha256.clone(),
        actual_output: outcome.manifest.output.sha256,
        expected_calls: manifest.total_calls,
        actual_calls: backend.calls(),
    })
}
