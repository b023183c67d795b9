//! Boundary to instruction-conditioned editing denoisers and samplers.

mod mock;
mod scheduler;

use std::sync::atomic::{AtomicUsize, Ordering};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::guidance::GuidanceError;
use crate::latent::Latent;

pub use mock::MockBackend;
pub use scheduler::{DdimScheduler, Scheduler, Timestep, TimestepSchedule};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("invalid backend input: {0}")]
    Validation(String),
    #[error("image {width}x{height} not divisible by downscale factor {factor}")]
    UnsupportedDims { width: u32, height: u32, factor: u32 },
    #[error(transparent)]
    Tensor(#[from] GuidanceError),
}

/// Conditioning for one denoiser call. `None` stands for the null condition.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConditioningSlot<'a> {
    pub image: Option<&'a Latent>,
    pub instruction: Option<&'a str>,
}

impl<'a> ConditioningSlot<'a> {
    /// `f(z_t, ∅, ∅)`.
    pub fn unconditional() -> Self {
        Self::default()
    }

    /// `f(z_t, E(x), ∅)`.
    pub fn image_only(image: &'a Latent) -> Self {
        Self {
            image: Some(image),
            instruction: None,
        }
    }

    /// `f(z_t, E(x), text)`.
    pub fn full(image: &'a Latent, instruction: &'a str) -> Self {
        Self {
            image: Some(image),
            instruction: Some(instruction),
        }
    }

    /// Instruction text, with an empty string treated as absent.
    pub fn effective_instruction(&self) -> Option<&'a str> {
        self.instruction.filter(|s| !s.is_empty())
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        match self.image {
            Some(img) => {
                h.update([1u8]);
                h.update(img.digest());
            }
            None => h.update([0u8]),
        }
        match self.effective_instruction() {
            Some(text) => {
                h.update([1u8]);
                h.update((text.len() as u64).to_le_bytes());
                h.update(text.as_bytes());
            }
            None => h.update([0u8]),
        }
        h.finalize().into()
    }
}

/// An instruction-conditioned latent editing model together with its autoencoder.
pub trait EditingBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Spatial reduction between pixels and latents.
    fn downscale_factor(&self) -> u32;

    fn latent_channels(&self) -> usize;

    /// Whether `estimate_noise` may be called from several threads at once.
    fn reentrant(&self) -> bool {
        false
    }

    fn latent_shape_for(&self, width: u32, height: u32) -> Result<(usize, usize, usize), BackendError> {
        let f = self.downscale_factor();
        if width == 0 || height == 0 || !width.is_multiple_of(f) || !height.is_multiple_of(f) {
            return Err(BackendError::UnsupportedDims {
                width,
                height,
                factor: f,
            });
        }
        Ok((self.latent_channels(), (height / f) as usize, (width / f) as usize))
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Latent, BackendError>;

    fn decode_latent(&self, z0: &Latent) -> Result<RgbImage, BackendError>;

    fn estimate_noise(&self, z_t: &Latent, cond: &ConditioningSlot<'_>, t: Timestep) -> Result<Latent, BackendError>;

    /// Several conditionings at one timestep. Backends with native batching
    /// override this; the default issues one call per slot.
    fn estimate_noise_batch(
        &self,
        z_t: &Latent,
        conds: &[ConditioningSlot<'_>],
        t: Timestep,
    ) -> Result<Vec<Latent>, BackendError> {
        conds.iter().map(|c| self.estimate_noise(z_t, c, t)).collect()
    }
}

/// Wraps a backend and counts `estimate_noise` invocations.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: EditingBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: EditingBackend> EditingBackend for CountingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn downscale_factor(&self) -> u32 {
        self.inner.downscale_factor()
    }

    fn latent_channels(&self) -> usize {
        self.inner.latent_channels()
    }

    fn reentrant(&self) -> bool {
        self.inner.reentrant()
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Latent, BackendError> {
        self.inner.encode_image(image)
    }

    fn decode_latent(&self, z0: &Latent) -> Result<RgbImage, BackendError> {
        self.inner.decode_latent(z0)
    }

    fn estimate_noise(&self, z_t: &Latent, cond: &ConditioningSlot<'_>, t: Timestep) -> Result<Latent, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.estimate_noise(z_t, cond, t)
    }
}

impl<B: EditingBackend + ?Sized> EditingBackend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn downscale_factor(&self) -> u32 {
        (**self).downscale_factor()
    }

    fn latent_channels(&self) -> usize {
        (**self).latent_channels()
    }

    fn reentrant(&self) -> bool {
        (**self).reentrant()
    }

    fn latent_shape_for(&self, width: u32, height: u32) -> Result<(usize, usize, usize), BackendError> {
        (**self).latent_shape_for(width, height)
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Latent, BackendError> {
        (**self).encode_image(image)
    }

    fn decode_latent(&self, z0: &Latent) -> Result<RgbImage, BackendError> {
        (**self).decode_latent(z0)
    }

    fn estimate_noise(&self, z_t: &Latent, cond: &ConditioningSlot<'_>, t: Timestep) -> Result<Latent, BackendError> {
        (**self).estimate_noise(z_t, cond, t)
    }

    fn estimate_noise_batch(
        &self,
        z_t: &Latent,
        conds: &[ConditioningSlot<'_>],
        t: Timestep,
    ) -> Result<Vec<Latent>, BackendError> {
        (**self).estimate_noise_batch(z_t, conds, t)
    }
}

/// Backend selection by id, as read from the `[backend]` config section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub id: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_downscale")]
    pub downscale: u32,
}

fn default_downscale() -> u32 {
    mock::DEFAULT_DOWNSCALE
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            id: "mock".into(),
            model: None,
            downscale: default_downscale(),
        }
    }
}

/// Instantiates the backend named by `spec`.
///
/// Only the deterministic mock ships with this build. Published editing
/// models (`ip2p`, `magicbrush`, `hqedit`) need weights and an inference
/// runtime, and are reported as unavailable.
pub fn load_backend(spec: &BackendSpec) -> Result<Box<dyn EditingBackend>, BackendError> {
    match spec.id.as_str() {
        "mock" => Ok(Box::new(MockBackend::new(spec.downscale)?)),
        "ip2p" | "instructpix2pix" | "magicbrush" | "mb" | "hqedit" => {
            Err(BackendError::Unavailable(format!(
                "backend '{}' (model {}) needs published model weights and a GPU runtime, which this build does not include",
                spec.id,
                spec.model.as_deref().unwrap_or("<unset>")
            )))
        }
        other => Err(BackendError::Unavailable(format!("unknown backend id '{other}'"))),
    }
}
