//! Editing-quality metrics computed from injected embedding and distance
//! providers, plus the pairwise LLM preference protocol.

mod embeddings;
mod preference;

use image::{GrayImage, Luma, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::specifier::{CaptionPair, ProviderError, SpecifierError};

pub use embeddings::{EmbeddingProvider, FixtureEmbeddings};
pub use preference::{gpt_preference, parse_verdict, preference_with_swap, PreferenceRecord, Verdict};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("metric {0} is undefined for this sample")]
    UndefinedMetric(&'static str),
    #[error("no samples given")]
    EmptySamples,
    #[error("image sizes differ: {0:?} vs {1:?}")]
    SizeMismatch((u32, u32), (u32, u32)),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Specifier(#[from] SpecifierError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub modality: Modality,
    pub provider: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, modality: Modality, provider: impl Into<String>) -> Result<Self, EvalError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite("embedding"));
        }
        Ok(Self {
            values,
            modality,
            provider: provider.into(),
        })
    }

    pub fn image(values: Vec<f64>) -> Self {
        Self::new(values, Modality::Image, "inline").expect("finite embedding")
    }

    pub fn text(values: Vec<f64>) -> Self {
        Self::new(values, Modality::Text, "inline").expect("finite embedding")
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn cosine_raw(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    // sqrt(na * nb) is exact for a == b, so self-similarity is exactly 1.
    let denom = (na * nb).sqrt();
    if !denom.is_finite() || denom == 0.0 {
        let scale = na.sqrt() * nb.sqrt();
        return Ok((dot / scale).clamp(-1.0, 1.0));
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]` against rounding.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EvalError> {
    cosine_raw(&a.values, &b.values)
}

/// Input preservation: similarity of the input and edited image embeddings.
pub fn clip_i(input: &EmbeddingVector, edited: &EmbeddingVector) -> Result<f64, EvalError> {
    cosine(input, edited)
}

/// Edit strength: similarity of the edited image and the final caption.
pub fn clip_d(edited: &EmbeddingVector, final_caption: &EmbeddingVector) -> Result<f64, EvalError> {
    cosine(edited, final_caption)
}

/// Directional similarity between the image change and the caption change.
pub fn clip_delta(
    input: &EmbeddingVector,
    edited: &EmbeddingVector,
    initial_caption: &EmbeddingVector,
    final_caption: &EmbeddingVector,
) -> Result<f64, EvalError> {
    let diff = |a: &EmbeddingVector, b: &EmbeddingVector| -> Result<Vec<f64>, EvalError> {
        if a.dim() != b.dim() {
            return Err(EvalError::DimensionMismatch(a.dim(), b.dim()));
        }
        Ok(a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect())
    };
    let image_diff = diff(edited, input)?;
    let text_diff = diff(final_caption, initial_caption)?;
    cosine_raw(&image_diff, &text_diff).map_err(|e| match e {
        EvalError::ZeroVector => EvalError::UndefinedMetric("clip_delta"),
        other => other,
    })
}

/// Metrics for one edited sample. `None` marks an undefined metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub clip_d: Option<f64>,
    pub clip_i: Option<f64>,
    pub clip_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMean {
    pub mean: Option<f64>,
    /// Samples where the metric was defined.
    pub count: usize,
}

impl MetricMean {
    fn over(values: impl Iterator<Item = Option<f64>>) -> Self {
        let defined: Vec<f64> = values.flatten().collect();
        let count = defined.len();
        let mean = (count > 0).then(|| defined.iter().sum::<f64>() / count as f64);
        Self { mean, count }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub provider: String,
    pub samples: Vec<SampleMetrics>,
    pub clip_d: MetricMean,
    pub clip_i: MetricMean,
    pub clip_delta: MetricMean,
}

impl MetricReport {
    pub fn from_samples(provider: impl Into<String>, samples: Vec<SampleMetrics>) -> Self {
        Self {
            provider: provider.into(),
            clip_d: MetricMean::over(samples.iter().map(|s| s.clip_d)),
            clip_i: MetricMean::over(samples.iter().map(|s| s.clip_i)),
            clip_delta: MetricMean::over(samples.iter().map(|s| s.clip_delta)),
            samples,
        }
    }
}

/// Computes all three embedding metrics for one `(input, edited)` pair.
pub fn evaluate_sample(
    provider: &dyn EmbeddingProvider,
    id: impl Into<String>,
    input: &RgbImage,
    edited: &RgbImage,
    captions: &CaptionPair,
) -> Result<SampleMetrics, EvalError> {
    let x = provider.embed_image(input)?;
    let x_tilde = provider.embed_image(edited)?;
    let init = provider.embed_text(&captions.initial)?;
    let fin = provider.embed_text(&captions.final_caption)?;
    let mut notes = Vec::new();
    let mut keep = |name: &str, r: Result<f64, EvalError>| -> Result<Option<f64>, EvalError> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(e @ (EvalError::UndefinedMetric(_) | EvalError::ZeroVector)) => {
                notes.push(format!("{name}: {e}"));
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };
    let clip_d = keep("clip_d", clip_d(&x_tilde, &fin))?;
    let clip_i = keep("clip_i", clip_i(&x, &x_tilde))?;
    let clip_delta = keep("clip_delta", clip_delta(&x, &x_tilde, &init, &fin))?;
    Ok(SampleMetrics {
        id: id.into(),
        clip_d,
        clip_i,
        clip_delta,
        notes,
    })
}

/// Distance between two images (perceptual or otherwise).
pub trait DistanceProvider: Send + Sync {
    fn id(&self) -> &str;

    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64, EvalError>;
}

/// Mean absolute per-channel difference, scaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAbsolutePixelDistance;

impl DistanceProvider for MeanAbsolutePixelDistance {
    fn id(&self) -> &str {
        "mean_abs_pixel"
    }

    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64, EvalError> {
        if a.dimensions() != b.dimensions() {
            return Err(EvalError::SizeMismatch(a.dimensions(), b.dimensions()));
        }
        let total: u64 = a
            .as_raw()
            .iter()
            .zip(b.as_raw())
            .map(|(&x, &y)| x.abs_diff(y) as u64)
            .sum();
        Ok(total as f64 / (a.as_raw().len().max(1) as f64 * 255.0))
    }
}

/// Mean distance from `reference` to each sample.
pub fn diversity(
    samples: &[RgbImage],
    reference: &RgbImage,
    provider: &dyn DistanceProvider,
) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let mut total = 0.0;
    for s in samples {
        total += provider.distance(reference, s)?;
    }
    Ok(total / samples.len() as f64)
}

/// Per-pixel mean over samples of `|x - sample|`, averaged over the RGB
/// channels. Values are in pixel units `[0, 255]`.
pub fn mean_pixel_difference(input: &RgbImage, samples: &[RgbImage]) -> Result<Array2<f64>, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let (w, h) = input.dimensions();
    let mut map = Array2::<f64>::zeros((h as usize, w as usize));
    for s in samples {
        if s.dimensions() != input.dimensions() {
            return Err(EvalError::SizeMismatch(input.dimensions(), s.dimensions()));
        }
        for (x, y, px) in input.enumerate_pixels() {
            let other = s.get_pixel(x, y);
            let d: u32 =
                px.0.iter()
                    .zip(other.0.iter())
                    .map(|(&a, &b)| a.abs_diff(b) as u32)
                    .sum();
            map[[y as usize, x as usize]] += d as f64 / 3.0;
        }
    }
    map /= samples.len() as f64;
    Ok(map)
}

/// Renders a difference map as an 8-bit grayscale image.
pub fn heatmap_image(map: &Array2<f64>) -> GrayImage {
    let (h, w) = map.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([map[[y as usize, x as usize]].round().clamp(0.0, 255.0) as u8])
    })
}

/// One `(edited image, specific instruction)` pair for an external
/// question-answering faithfulness tool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TifaPair {
    pub image: String,
    pub instruction: String,
}

pub fn tifa_pairs(edited_image_path: &str, instructions: &[String]) -> Vec<TifaPair> {
    instructions
        .iter()
        .map(|s| TifaPair {
            image: edited_image_path.to_string(),
            instruction: s.clone(),
        })
        .collect()
}
