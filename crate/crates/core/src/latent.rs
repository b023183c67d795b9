//! Dense `[channels, height, width]` tensors used for latents and noise estimates.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::guidance::GuidanceError;

/// A finite, non-empty `[channels, height, width]` array of `f32`.
///
/// Holds the noisy latent `z_t`, encoded images and every noise estimate
/// produced by a denoiser. The finiteness invariant is checked on every
/// construction, so downstream algebra never sees NaN or infinities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Array3<f32>", into = "Array3<f32>")]
pub struct Latent {
    data: Array3<f32>,
}

impl Latent {
    pub fn new(data: Array3<f32>) -> Result<Self, GuidanceError> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(GuidanceError::Invalid(format!(
                "latent dims must be positive, got {c}x{h}x{w}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(GuidanceError::NonFinite { index: pos });
        }
        Ok(Self { data })
    }

    pub fn from_shape_vec(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
    ) -> Result<Self, GuidanceError> {
        let expected = channels * height * width;
        if values.len() != expected {
            return Err(GuidanceError::Invalid(format!(
                "expected {expected} values for {channels}x{height}x{width}, got {}",
                values.len()
            )));
        }
        let data = Array3::from_shape_vec((channels, height, width), values)
            .map_err(|e| GuidanceError::Invalid(e.to_string()))?;
        Self::new(data)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self, GuidanceError> {
        Self::new(Array3::zeros((channels, height, width)))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self, GuidanceError> {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn spatial_shape(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn as_array(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_array(self) -> Array3<f32> {
        self.data
    }

    /// Values in row-major `[c][h][w]` order.
    pub fn to_vec(&self) -> Vec<f32> {
        self.data.iter().copied().collect()
    }

    pub fn channel(&self, c: usize) -> Array2<f32> {
        self.data.index_axis(Axis(0), c).to_owned()
    }

    /// Stable SHA-256 over the shape and little-endian element bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        let (c, h, w) = self.shape();
        for d in [c, h, w] {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in self.data.iter() {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().into()
    }

    pub(crate) fn ensure_same_shape(&self, other: &Latent) -> Result<(), GuidanceError> {
        if self.shape() != other.shape() {
            return Err(GuidanceError::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Array3<f32>> for Latent {
    type Error = GuidanceError;

    fn try_from(data: Array3<f32>) -> Result<Self, Self::Error> {
        Self::new(data)
    }
}

impl From<Latent> for Array3<f32> {
    fn from(latent: Latent) -> Self {
        latent.data
    }
}
