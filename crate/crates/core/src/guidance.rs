//! Guidance algebra: classifier-free guidance over image and instruction
//! conditioning, extended with a mask-aggregated term for a set of specific
//! instructions.
//!
//! All functions are pure. Each spatial location of the aggregated specific
//! noise is copied from exactly one specific-instruction estimate: the one
//! whose channel-mean absolute deviation from the image-only estimate is
//! largest. Ties go to the lowest index.

use ndarray::{Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::Latent;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Default image guidance strength.
pub const DEFAULT_W_IMAGE: f32 = 1.5;
/// Default instruction guidance strength.
pub const DEFAULT_W_TEXT: f32 = 7.0;

/// Editing model families with tuned specific-instruction weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    InstructPix2Pix,
    MagicBrush,
    HqEdit,
}

impl ModelFamily {
    pub fn specific_weight(self) -> f32 {
        match self {
            ModelFamily::InstructPix2Pix => 7.0,
            ModelFamily::MagicBrush => 5.0,
            ModelFamily::HqEdit => 9.0,
        }
    }
}

/// Strengths of the image, instruction and specific-instruction guidance terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceWeights {
    pub w_image: f32,
    pub w_text: f32,
    pub w_specific: f32,
}

impl GuidanceWeights {
    pub fn new(w_image: f32, w_text: f32, w_specific: f32) -> Result<Self, GuidanceError> {
        let weights = Self {
            w_image,
            w_text,
            w_specific,
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn for_model(family: ModelFamily) -> Self {
        Self {
            w_image: DEFAULT_W_IMAGE,
            w_text: DEFAULT_W_TEXT,
            w_specific: family.specific_weight(),
        }
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        if [self.w_image, self.w_text, self.w_specific]
            .iter()
            .all(|w| w.is_finite())
        {
            Ok(())
        } else {
            Err(GuidanceError::Invalid(format!(
                "guidance weights must be finite: {self:?}"
            )))
        }
    }
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self::for_model(ModelFamily::InstructPix2Pix)
    }
}

/// Per-location index of the winning specific instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    indices: Array2<usize>,
    choices: usize,
}

impl SelectionMask {
    pub fn new(indices: Array2<usize>, choices: usize) -> Result<Self, GuidanceError> {
        if choices == 0 {
            return Err(GuidanceError::Invalid(
                "selection mask needs at least one choice".into(),
            ));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= choices) {
            return Err(GuidanceError::Invalid(format!(
                "mask index {bad} out of range for {choices} choices"
            )));
        }
        Ok(Self { indices, choices })
    }

    /// A mask selecting `index` everywhere.
    pub fn uniform(height: usize, width: usize, index: usize, choices: usize) -> Result<Self, GuidanceError> {
        Self::new(Array2::from_elem((height, width), index), choices)
    }

    pub fn indices(&self) -> &Array2<usize> {
        &self.indices
    }

    /// Number of instructions the mask selects among.
    pub fn choices(&self) -> usize {
        self.choices
    }

    pub fn shape(&self) -> (usize, usize) {
        self.indices.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.indices[[row, col]]
    }

    /// Number of locations won by each instruction.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.choices];
        for &i in self.indices.iter() {
            counts[i] += 1;
        }
        counts
    }

    /// Indicator `1(M = index)` as a `0/1` array.
    pub fn indicator(&self, index: usize) -> Array2<u8> {
        self.indices.mapv(|i| u8::from(i == index))
    }
}

fn ensure_all_same_shape(reference: &Latent, others: &[&Latent]) -> Result<(), GuidanceError> {
    for other in others {
        reference.ensure_same_shape(other)?;
    }
    Ok(())
}

/// Three-term classifier-free guidance:
/// `uncond + w_image * (image - uncond) + w_text * (full - image)`.
pub fn cfg_combine(
    eps_uncond: &Latent,
    eps_image: &Latent,
    eps_full: &Latent,
    weights: &GuidanceWeights,
) -> Result<Latent, GuidanceError> {
    weights.validate()?;
    ensure_all_same_shape(eps_uncond, &[eps_image, eps_full])?;
    let (wi, wt) = (weights.w_image, weights.w_text);
    let mut out = Array3::zeros(eps_uncond.shape());
    Zip::from(&mut out)
        .and(eps_uncond.as_array())
        .and(eps_image.as_array())
        .and(eps_full.as_array())
        .for_each(|o, &u, &i, &f| *o = u + wi * (i - u) + wt * (f - i));
    Latent::new(out)
}

/// `|eps_specific - eps_image|`, elementwise.
pub fn specific_delta(eps_specific: &Latent, eps_image: &Latent) -> Result<Latent, GuidanceError> {
    eps_specific.ensure_same_shape(eps_image)?;
    let mut out = Array3::zeros(eps_specific.shape());
    Zip::from(&mut out)
        .and(eps_specific.as_array())
        .and(eps_image.as_array())
        .for_each(|o, &s, &i| *o = (s - i).abs());
    Latent::new(out)
}

/// Mean of `delta` over the channel axis, one value per spatial location.
pub fn channel_salience(delta: &Latent) -> Array2<f32> {
    let channels = delta.channels() as f32;
    delta.as_array().sum_axis(Axis(0)) / channels
}

/// Per-location argmax over the salience maps; ties resolve to the lowest index.
pub fn build_selection_mask(saliences: &[Array2<f32>]) -> Result<SelectionMask, GuidanceError> {
    let first = saliences
        .first()
        .ok_or_else(|| GuidanceError::Invalid("no salience maps to select from".into()))?;
    let shape = first.dim();
    for s in &saliences[1..] {
        if s.dim() != shape {
            return Err(GuidanceError::ShapeMismatch {
                expected: (1, shape.0, shape.1),
                found: (1, s.dim().0, s.dim().1),
            });
        }
    }
    let mut best = first.clone();
    let mut indices = Array2::<usize>::zeros(shape);
    for (i, s) in saliences.iter().enumerate().skip(1) {
        Zip::from(&mut best).and(&mut indices).and(s).for_each(|b, idx, &v| {
            if v > *b {
                *b = v;
                *idx = i;
            }
        });
    }
    SelectionMask::new(indices, saliences.len())
}

/// Copies all channels at each location from the noise the mask selects there.
pub fn aggregate_by_mask(noises: &[Latent], mask: &SelectionMask) -> Result<Latent, GuidanceError> {
    let first = noises
        .first()
        .ok_or_else(|| GuidanceError::Invalid("no noise estimates to aggregate".into()))?;
    for n in &noises[1..] {
        first.ensure_same_shape(n)?;
    }
    if mask.shape() != first.spatial_shape() {
        let (c, _, _) = first.shape();
        return Err(GuidanceError::ShapeMismatch {
            expected: first.shape(),
            found: (c, mask.shape().0, mask.shape().1),
        });
    }
    if mask.choices() > noises.len() || mask.indices().iter().any(|&i| i >= noises.len()) {
        return Err(GuidanceError::Invalid(format!(
            "mask selects among {} instructions but only {} noise estimates were given",
            mask.choices(),
            noises.len()
        )));
    }
    let (channels, height, width) = first.shape();
    let mut out = Array3::zeros((channels, height, width));
    for ((row, col), &winner) in mask.indices().indexed_iter() {
        let src = noises[winner].as_array();
        for c in 0..channels {
            out[[c, row, col]] = src[[c, row, col]];
        }
    }
    Latent::new(out)
}

/// `w_specific * (eps_bar - eps_image)`.
pub fn specific_guidance_term(eps_bar: &Latent, eps_image: &Latent, w_specific: f32) -> Result<Latent, GuidanceError> {
    if !w_specific.is_finite() {
        return Err(GuidanceError::Invalid(format!(
            "specific weight must be finite, got {w_specific}"
        )));
    }
    eps_bar.ensure_same_shape(eps_image)?;
    let mut out = Array3::zeros(eps_bar.shape());
    Zip::from(&mut out)
        .and(eps_bar.as_array())
        .and(eps_image.as_array())
        .for_each(|o, &b, &i| *o = w_specific * (b - i));
    Latent::new(out)
}

fn add(a: &Latent, b: &Latent) -> Result<Latent, GuidanceError> {
    a.ensure_same_shape(b)?;
    Latent::new(a.as_array() + b.as_array())
}

fn require_specifics(eps_specifics: &[Latent]) -> Result<(), GuidanceError> {
    if eps_specifics.is_empty() {
        return Err(GuidanceError::Invalid(
            "at least one specific-instruction estimate is required; use baseline guidance for none".into(),
        ));
    }
    Ok(())
}

/// Masked aggregation of the specific estimates around the image-only estimate.
///
/// Returns the aggregated noise together with the mask that produced it.
pub fn masked_specific_noise(
    eps_image: &Latent,
    eps_specifics: &[Latent],
) -> Result<(Latent, SelectionMask), GuidanceError> {
    require_specifics(eps_specifics)?;
    let saliences = eps_specifics
        .iter()
        .map(|s| specific_delta(s, eps_image).map(|d| channel_salience(&d)))
        .collect::<Result<Vec<_>, _>>()?;
    let mask = build_selection_mask(&saliences)?;
    let eps_bar = aggregate_by_mask(eps_specifics, &mask)?;
    Ok((eps_bar, mask))
}

/// Four-term guidance: three-term CFG plus the mask-aggregated specific term.
pub fn sane_combine(
    eps_uncond: &Latent,
    eps_image: &Latent,
    eps_full: &Latent,
    eps_specifics: &[Latent],
    weights: &GuidanceWeights,
) -> Result<(Latent, SelectionMask), GuidanceError> {
    require_specifics(eps_specifics)?;
    ensure_all_same_shape(eps_uncond, &[eps_image, eps_full])?;
    for s in eps_specifics {
        eps_image.ensure_same_shape(s)?;
    }
    let base = cfg_combine(eps_uncond, eps_image, eps_full, weights)?;
    let (eps_bar, mask) = masked_specific_noise(eps_image, eps_specifics)?;
    let term = specific_guidance_term(&eps_bar, eps_image, weights.w_specific)?;
    Ok((add(&base, &term)?, mask))
}

/// Elementwise mean of the given estimates.
pub fn average_aggregate(noises: &[Latent]) -> Result<Latent, GuidanceError> {
    let first = noises
        .first()
        .ok_or_else(|| GuidanceError::Invalid("no noise estimates to average".into()))?;
    let mut sum = first.as_array().clone();
    for n in &noises[1..] {
        first.ensure_same_shape(n)?;
        sum += n.as_array();
    }
    let count = noises.len() as f32;
    Latent::new(sum / count)
}

/// Composable-diffusion style combination: every specific delta is added
/// with the shared weight `w_specific`, without masking.
pub fn composable_combine(
    eps_uncond: &Latent,
    eps_image: &Latent,
    eps_full: &Latent,
    eps_specifics: &[Latent],
    weights: &GuidanceWeights,
) -> Result<Latent, GuidanceError> {
    require_specifics(eps_specifics)?;
    let mut out = cfg_combine(eps_uncond, eps_image, eps_full, weights)?;
    for s in eps_specifics {
        let term = specific_guidance_term(s, eps_image, weights.w_specific)?;
        out = add(&out, &term)?;
    }
    Ok(out)
}
