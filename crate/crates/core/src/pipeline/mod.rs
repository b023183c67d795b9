//! End-to-end edit orchestration: encode, denoise with the chosen guidance
//! strategy, decode, and record a manifest.

mod manifest;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use image::RgbImage;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{BackendError, ConditioningSlot, DdimScheduler, EditingBackend, Scheduler};
use crate::guidance::{
    average_aggregate, cfg_combine, composable_combine, sane_combine, specific_guidance_term, GuidanceError,
    GuidanceWeights, SelectionMask,
};
use crate::latent::Latent;
use crate::specifier::{AmbiguousInstruction, SpecificInstructionSet, SpecifierError, DEFAULT_MAX_N};

pub use manifest::{
    image_digest, replay_manifest, BackendInfo, EditManifest, ImageRef, ManifestError, ReplayReport, StepRecord,
    Timings, MANIFEST_VERSION,
};

/// Separator used when folding specific instructions into one prompt.
pub const CONCAT_SEPARATOR: &str = ", ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditStrategy {
    /// Three-term classifier-free guidance on the original instruction.
    Baseline,
    /// Baseline guidance plus the mask-aggregated specific-instruction term.
    Sane,
    /// As `Sane` with the original-instruction term weighted by zero.
    SaneNoC,
    /// As `Sane` with the mask replaced by a plain average.
    SaneAvg,
    /// Baseline guidance on `c, s_1, ..., s_N`.
    PromptConcat,
    /// Every specific delta added with the shared specific weight.
    Composable,
}

impl EditStrategy {
    pub const ALL: [EditStrategy; 6] = [
        EditStrategy::Baseline,
        EditStrategy::Sane,
        EditStrategy::SaneNoC,
        EditStrategy::SaneAvg,
        EditStrategy::PromptConcat,
        EditStrategy::Composable,
    ];

    /// Strategies that issue one extra denoiser call per specific instruction.
    pub fn requires_specifics(self) -> bool {
        matches!(
            self,
            EditStrategy::Sane | EditStrategy::SaneNoC | EditStrategy::SaneAvg | EditStrategy::Composable
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EditStrategy::Baseline => "baseline",
            EditStrategy::Sane => "sane",
            EditStrategy::SaneNoC => "sane_no_c",
            EditStrategy::SaneAvg => "sane_avg",
            EditStrategy::PromptConcat => "prompt_concat",
            EditStrategy::Composable => "composable",
        }
    }
}

impl fmt::Display for EditStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EditStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|st| st.as_str() == norm).ok_or_else(|| {
            format!(
                "unknown strategy '{s}', expected one of: {}",
                Self::ALL.map(|s| s.as_str()).join(", ")
            )
        })
    }
}

/// Denoiser calls needed for one edit.
pub fn estimate_cost(strategy: EditStrategy, n_specific: usize, steps: usize) -> usize {
    steps * calls_per_step(strategy, n_specific)
}

pub fn calls_per_step(strategy: EditStrategy, n_specific: usize) -> usize {
    if strategy.requires_specifics() {
        3 + n_specific
    } else {
        3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: String,
    pub eta: f64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            kind: "ddim".into(),
            eta: 1.0,
        }
    }
}

impl SamplerSpec {
    pub fn build(&self) -> Result<DdimScheduler, BackendError> {
        match self.kind.as_str() {
            "ddim" => DdimScheduler::new(self.eta),
            other => Err(BackendError::Validation(format!("unknown sampler '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub weights: GuidanceWeights,
    pub steps: usize,
    pub seed: u64,
    /// `(width, height)` the input is resized to before encoding.
    pub image_size: (u32, u32),
    pub n_specific: usize,
    pub max_specific: usize,
    pub sampler: SamplerSpec,
    /// Issue all conditional calls of a step as one batched backend call.
    pub batched: bool,
    /// Store full per-step masks instead of histograms only.
    pub dump_masks: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            weights: GuidanceWeights::default(),
            steps: 30,
            seed: 0,
            image_size: (512, 512),
            n_specific: DEFAULT_MAX_N,
            max_specific: DEFAULT_MAX_N,
            sampler: SamplerSpec::default(),
            batched: false,
            dump_masks: false,
        }
    }
}

impl EditConfig {
    pub fn validate(&self, strategy: EditStrategy) -> Result<(), PipelineError> {
        self.weights.validate()?;
        if self.steps == 0 {
            return Err(PipelineError::Config("steps must be at least 1".into()));
        }
        if self.n_specific > self.max_specific {
            return Err(PipelineError::Config(format!(
                "n_specific {} exceeds the maximum {}",
                self.n_specific, self.max_specific
            )));
        }
        if strategy.requires_specifics() && self.n_specific == 0 {
            return Err(PipelineError::Config(format!(
                "strategy {strategy} needs at least one specific instruction; use baseline for none"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Specifier(#[from] SpecifierError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("step {step} (t={timestep}): {source}")]
    Step {
        step: usize,
        timestep: u32,
        #[source]
        source: StepError,
    },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

/// Noise estimates gathered at one timestep.
#[derive(Debug, Clone)]
pub struct NoiseEstimates {
    pub uncond: Latent,
    pub image: Latent,
    pub full: Latent,
    pub specifics: Vec<Latent>,
}

/// Dispatches one step's guidance combination. Returns the guided estimate
/// and, for masked strategies, the selection mask.
pub fn per_step_combination(
    strategy: EditStrategy,
    estimates: &NoiseEstimates,
    weights: &GuidanceWeights,
) -> Result<(Latent, Option<SelectionMask>), PipelineError> {
    let NoiseEstimates {
        uncond,
        image,
        full,
        specifics,
    } = estimates;
    if strategy.requires_specifics() && specifics.is_empty() {
        return Err(PipelineError::Invariant(format!(
            "strategy {strategy} dispatched without specific-instruction estimates"
        )));
    }
    Ok(match strategy {
        EditStrategy::Baseline | EditStrategy::PromptConcat => (cfg_combine(uncond, image, full, weights)?, None),
        EditStrategy::Sane => {
            let (out, mask) = sane_combine(uncond, image, full, specifics, weights)?;
            (out, Some(mask))
        }
        EditStrategy::SaneNoC => {
            let w = GuidanceWeights {
                w_text: 0.0,
                ..*weights
            };
            let (out, mask) = sane_combine(uncond, image, full, specifics, &w)?;
            (out, Some(mask))
        }
        EditStrategy::SaneAvg => {
            let base = cfg_combine(uncond, image, full, weights)?;
            let avg = average_aggregate(specifics)?;
            let term = specific_guidance_term(&avg, image, weights.w_specific)?;
            (Latent::new(base.as_array() + term.as_array())?, None)
        }
        EditStrategy::Composable => (composable_combine(uncond, image, full, specifics, weights)?, None),
    })
}

/// Text of the instruction-conditioned call for `strategy`.
pub fn instruction_text(strategy: EditStrategy, c: &AmbiguousInstruction, specifics: &[String]) -> String {
    if strategy == EditStrategy::PromptConcat && !specifics.is_empty() {
        std::iter::once(c.as_str())
            .chain(specifics.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(CONCAT_SEPARATOR)
    } else {
        c.as_str().to_string()
    }
}

/// Inputs to one edit.
pub struct EditRequest<'a> {
    pub image: &'a RgbImage,
    pub instruction: &'a AmbiguousInstruction,
    pub specifics: Option<&'a SpecificInstructionSet>,
    pub config: &'a EditConfig,
    pub strategy: EditStrategy,
}

pub struct EditOutcome {
    pub image: RgbImage,
    pub manifest: EditManifest,
}

/// Runs an edit with the sampler named in `config.sampler`.
pub fn run_edit(
    image: &RgbImage,
    c: &AmbiguousInstruction,
    spec_set: Option<&SpecificInstructionSet>,
    config: &EditConfig,
    strategy: EditStrategy,
    backend: &dyn EditingBackend,
) -> Result<EditOutcome, PipelineError> {
    let scheduler = config.sampler.build()?;
    run_edit_with_scheduler(
        &EditRequest {
            image,
            instruction: c,
            specifics: spec_set,
            config,
            strategy,
        },
        backend,
        &scheduler,
    )
}

pub fn run_edit_with_scheduler(
    request: &EditRequest<'_>,
    backend: &dyn EditingBackend,
    scheduler: &dyn Scheduler,
) -> Result<EditOutcome, PipelineError> {
    let started = Instant::now();
    let EditRequest {
        image,
        instruction,
        specifics,
        config,
        strategy,
    } = *request;
    config.validate(strategy)?;

    let uses_specifics = strategy.requires_specifics() || strategy == EditStrategy::PromptConcat;
    let used: Vec<String> = match (uses_specifics, specifics) {
        (true, Some(set)) if config.n_specific > 0 => set.prefix(config.n_specific)?.instructions().to_vec(),
        (true, None) if strategy.requires_specifics() => {
            return Err(PipelineError::Config(format!(
                "strategy {strategy} needs a specific instruction set"
            )))
        }
        _ => Vec::new(),
    };
    let text = instruction_text(strategy, instruction, &used);
    let conditioned_specifics: &[String] = if strategy.requires_specifics() { &used } else { &[] };

    let (width, height) = config.image_size;
    backend.latent_shape_for(width, height)?;
    let input = if image.dimensions() == (width, height) {
        image.clone()
    } else {
        image::imageops::resize(image, width, height, image::imageops::FilterType::Lanczos3)
    };

    let t_encode = Instant::now();
    let image_latent = backend.encode_image(&input)?;
    let encode_ms = t_encode.elapsed().as_secs_f64() * 1e3;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sigma = scheduler.init_noise_sigma();
    let mut z = Latent::new(Array3::from_shape_simple_fn(image_latent.shape(), || {
        sigma * rng.sample::<f32, _>(StandardNormal)
    }))?;

    let schedule = scheduler.schedule(config.steps)?;
    let mut steps = Vec::with_capacity(schedule.total_steps());
    let mut total_calls = 0;
    let t_denoise = Instant::now();
    for (step, &t) in schedule.timesteps().iter().enumerate() {
        let at_step = |source: StepError| PipelineError::Step {
            step,
            timestep: t.0,
            source,
        };
        let mut conds = vec![
            ConditioningSlot::unconditional(),
            ConditioningSlot::image_only(&image_latent),
            ConditioningSlot::full(&image_latent, &text),
        ];
        conds.extend(
            conditioned_specifics
                .iter()
                .map(|s| ConditioningSlot::full(&image_latent, s)),
        );
        let outputs = if config.batched {
            backend.estimate_noise_batch(&z, &conds, t)
        } else {
            conds.iter().map(|c| backend.estimate_noise(&z, c, t)).collect()
        }
        .map_err(|e| at_step(e.into()))?;
        if outputs.len() != conds.len() {
            return Err(PipelineError::Invariant(format!(
                "backend returned {} estimates for {} conditionings",
                outputs.len(),
                conds.len()
            )));
        }
        total_calls += conds.len();
        let mut outputs = outputs.into_iter();
        let estimates = NoiseEstimates {
            uncond: outputs.next().expect("length checked"),
            image: outputs.next().expect("length checked"),
            full: outputs.next().expect("length checked"),
            specifics: outputs.collect(),
        };
        let (eps, mask) = match per_step_combination(strategy, &estimates, &config.weights) {
            Ok(v) => v,
            Err(PipelineError::Guidance(g)) => return Err(at_step(g.into())),
            Err(e) => return Err(e),
        };
        z = scheduler
            .step(&z, &eps, t, &schedule, &mut rng)
            .map_err(|e| at_step(e.into()))?;
        steps.push(StepRecord {
            step,
            timestep: t.0,
            calls: conds.len(),
            mask_histogram: mask.as_ref().map(SelectionMask::histogram),
            mask: if config.dump_masks {
                mask.map(|m| m.indices().clone())
            } else {
                None
            },
        });
    }
    let denoise_ms = t_denoise.elapsed().as_secs_f64() * 1e3;

    let t_decode = Instant::now();
    let edited = backend.decode_latent(&z)?;
    let decode_ms = t_decode.elapsed().as_secs_f64() * 1e3;

    let per_step = calls_per_step(strategy, conditioned_specifics.len());
    let manifest = EditManifest {
        manifest_version: MANIFEST_VERSION,
        input: ImageRef::of(image, None),
        instruction: instruction.as_str().to_string(),
        specific_instructions: specifics.cloned(),
        instructions_used: used,
        conditioning_text: text,
        strategy,
        config: config.clone(),
        backend: BackendInfo {
            id: backend.id().to_string(),
            downscale_factor: backend.downscale_factor(),
            latent_channels: backend.latent_channels(),
            batching: if config.batched { "batched" } else { "sequential" }.into(),
        },
        sampler: scheduler.id(),
        calls_per_step: per_step,
        total_calls,
        steps,
        output: ImageRef::of(&edited, None),
        captions: None,
        metrics: None,
        timings: Timings {
            encode_ms,
            denoise_ms,
            decode_ms,
            total_ms: started.elapsed().as_secs_f64() * 1e3,
        },
    };
    Ok(EditOutcome {
        image: edited,
        manifest,
    })
}
