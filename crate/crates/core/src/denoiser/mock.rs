use image::RgbImage;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{BackendError, ConditioningSlot, EditingBackend, Timestep};
use crate::latent::Latent;

pub(super) const DEFAULT_DOWNSCALE: u32 = 8;

/// Weight on the encoded image when image conditioning is present.
const IMAGE_GAIN: f32 = 0.1;
/// Offset added inside the instruction's patch.
const INSTRUCTION_BIAS: f32 = 0.5;
/// Amplitude of the instruction-seeded field over the whole latent.
const INSTRUCTION_JITTER: f32 = 0.05;

/// Deterministic stand-in for an editing diffusion model.
///
/// The autoencoder is a lossless space-to-depth transform: each `f x f`
/// pixel block becomes `3 * f * f` channels at one latent location, with
/// pixel values mapped to `[-1, 1]`.
///
/// The noise estimate is
/// `N(0, 1)[seed = H(z_t, t)] + 0.1 * E(x) + instruction term`, where the
/// instruction term is a `0.05`-scale field seeded by the instruction text
/// plus a `0.5` offset on a quarter-size patch whose position is also derived
/// from the text. Every call is a pure function of its inputs.
#[derive(Debug, Clone)]
pub struct MockBackend {
    downscale: u32,
}

impl MockBackend {
    pub fn new(downscale: u32) -> Result<Self, BackendError> {
        if downscale == 0 {
            return Err(BackendError::Validation("downscale factor must be ≥ 1".into()));
        }
        Ok(Self { downscale })
    }

    fn seeded_rng(parts: &[&[u8]]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self {
            downscale: DEFAULT_DOWNSCALE,
        }
    }
}

fn to_unit(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

fn to_pixel(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl EditingBackend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn downscale_factor(&self) -> u32 {
        self.downscale
    }

    fn latent_channels(&self) -> usize {
        let f = self.downscale as usize;
        3 * f * f
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Latent, BackendError> {
        let shape = self.latent_shape_for(image.width(), image.height())?;
        let f = self.downscale as usize;
        let mut data = Array3::zeros(shape);
        for (x, y, px) in image.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            for (color, &p) in px.0.iter().enumerate() {
                let c = (color * f + y % f) * f + x % f;
                data[[c, y / f, x / f]] = to_unit(p);
            }
        }
        Ok(Latent::new(data)?)
    }

    fn decode_latent(&self, z0: &Latent) -> Result<RgbImage, BackendError> {
        let f = self.downscale as usize;
        let (c, h, w) = z0.shape();
        if c != self.latent_channels() {
            return Err(BackendError::Validation(format!(
                "mock decoder expects {} channels, got {c}",
                self.latent_channels()
            )));
        }
        let data = z0.as_array();
        let mut image = RgbImage::new((w * f) as u32, (h * f) as u32);
        for (x, y, px) in image.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            for color in 0..3 {
                let ch = (color * f + y % f) * f + x % f;
                px.0[color] = to_pixel(data[[ch, y / f, x / f]]);
            }
        }
        Ok(image)
    }

    fn estimate_noise(&self, z_t: &Latent, cond: &ConditioningSlot<'_>, t: Timestep) -> Result<Latent, BackendError> {
        let (c, h, w) = z_t.shape();
        if c != self.latent_channels() {
            return Err(BackendError::Validation(format!(
                "latent has {c} channels, mock model expects {}",
                self.latent_channels()
            )));
        }
        let mut rng = Self::seeded_rng(&[&z_t.digest(), &t.0.to_le_bytes()]);
        let mut out = Array3::<f32>::from_shape_simple_fn((c, h, w), || rng.sample(StandardNormal));

        if let Some(image) = cond.image {
            if image.shape() != z_t.shape() {
                return Err(BackendError::Validation(format!(
                    "image latent shape {:?} does not match z_t {:?}",
                    image.shape(),
                    z_t.shape()
                )));
            }
            out.scaled_add(IMAGE_GAIN, image.as_array());
        }

        if let Some(text) = cond.effective_instruction() {
            let mut rng = Self::seeded_rng(&[b"instruction", text.as_bytes()]);
            out.zip_mut_with(
                &Array3::<f32>::from_shape_simple_fn((c, h, w), || rng.sample(StandardNormal)),
                |o, &j| *o += INSTRUCTION_JITTER * j,
            );
            let (ph, pw) = (h.div_ceil(2), w.div_ceil(2));
            let row0 = rng.random_range(0..=h - ph);
            let col0 = rng.random_range(0..=w - pw);
            out.slice_mut(ndarray::s![.., row0..row0 + ph, col0..col0 + pw])
                .mapv_inplace(|v| v + INSTRUCTION_BIAS);
        }
        Ok(Latent::new(out)?)
    }
}
