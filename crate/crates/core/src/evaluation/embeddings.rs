use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingVector, EvalError, Modality};
use crate::pipeline::image_digest;

/// Joint image/text embedding model.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;

    fn embed_image(&self, image: &RgbImage) -> Result<EmbeddingVector, EvalError>;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EvalError>;
}

/// Deterministic offline embeddings.
///
/// Explicit vectors can be pinned per caption text or per image digest
/// (see [`image_digest`]); anything else maps to a unit vector seeded by a
/// hash of the content.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureEmbeddings {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub texts: HashMap<String, Vec<f64>>,
    #[serde(default)]
    pub images: HashMap<String, Vec<f64>>,
}

fn default_dim() -> usize {
    64
}

impl Default for FixtureEmbeddings {
    fn default() -> Self {
        Self::new(default_dim())
    }
}

impl FixtureEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            texts: HashMap::new(),
            images: HashMap::new(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, EvalError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| EvalError::Evaluation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| EvalError::Evaluation(format!("{}: {e}", path.display())))
    }

    pub fn with_text(mut self, text: &str, values: Vec<f64>) -> Self {
        self.texts.insert(text.to_string(), values);
        self
    }

    pub fn with_image(mut self, image: &RgbImage, values: Vec<f64>) -> Self {
        self.images.insert(image_digest(image), values);
        self
    }

    fn hashed_unit(&self, tag: &[u8], content: &[u8]) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(tag);
        h.update(content);
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let v: Vec<f64> = (0..self.dim.max(1)).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }
}

impl EmbeddingProvider for FixtureEmbeddings {
    fn id(&self) -> &str {
        "fixture"
    }

    fn embed_image(&self, image: &RgbImage) -> Result<EmbeddingVector, EvalError> {
        let digest = image_digest(image);
        let values = match self.images.get(&digest) {
            Some(v) => v.clone(),
            None => self.hashed_unit(b"image", digest.as_bytes()),
        };
        EmbeddingVector::new(values, Modality::Image, self.id())
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EvalError> {
        let values = match self.texts.get(text) {
            Some(v) => v.clone(),
            None => self.hashed_unit(b"text", text.as_bytes()),
        };
        EmbeddingVector::new(values, Modality::Text, self.id())
    }
}
