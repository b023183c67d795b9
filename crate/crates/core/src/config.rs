//! TOML run configuration with `[weights]`, `[sampler]`, `[backend]`,
//! `[llm]`, `[edit]` and `[eval]` sections. Every field has a default, so an
//! empty file (or no file) is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::BackendSpec;
use crate::guidance::{GuidanceWeights, ModelFamily, DEFAULT_W_IMAGE, DEFAULT_W_TEXT};
use crate::pipeline::{EditConfig, EditStrategy, SamplerSpec};
use crate::specifier::{DEFAULT_CAPTION_WORDS, DEFAULT_MAX_N, DEFAULT_MAX_RETRIES};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    /// Selects the tuned specific weight when `w_specific` is unset.
    pub model: Option<ModelFamily>,
    pub w_image: f32,
    pub w_text: f32,
    pub w_specific: Option<f32>,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self {
            model: None,
            w_image: DEFAULT_W_IMAGE,
            w_text: DEFAULT_W_TEXT,
            w_specific: None,
        }
    }
}

impl WeightsSection {
    pub fn resolve(&self) -> GuidanceWeights {
        let family = self.model.unwrap_or(ModelFamily::InstructPix2Pix);
        GuidanceWeights {
            w_image: self.w_image,
            w_text: self.w_text,
            w_specific: self.w_specific.unwrap_or(family.specific_weight()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: String,
    pub eta: f64,
    pub steps: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerSpec::default();
        Self {
            kind: s.kind,
            eta: s.eta,
            steps: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    /// `fixture` or `openai`.
    pub provider: String,
    pub model: String,
    /// Fixture rules file for the `fixture` provider.
    pub fixtures: Option<PathBuf>,
    pub base_url: Option<String>,
    pub temperature: Option<f32>,
    pub cache_dir: PathBuf,
    pub max_retries: usize,
    pub caption_max_words: usize,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            provider: "fixture".into(),
            model: "gpt-4o".into(),
            fixtures: None,
            base_url: None,
            temperature: None,
            cache_dir: PathBuf::from(".sane-cache"),
            max_retries: DEFAULT_MAX_RETRIES,
            caption_max_words: DEFAULT_CAPTION_WORDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub seed: u64,
    pub n: usize,
    pub max_n: usize,
    pub strategy: EditStrategy,
    pub width: u32,
    pub height: u32,
    pub batched: bool,
    pub dump_masks: bool,
    /// Caption given to the decomposition prompt; generated when unset.
    pub caption: Option<String>,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            seed: 0,
            n: DEFAULT_MAX_N,
            max_n: DEFAULT_MAX_N,
            strategy: EditStrategy::Sane,
            width: 512,
            height: 512,
            batched: false,
            dump_masks: false,
            caption: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `fixture`, or a path to a fixture embedding table.
    pub embeddings: String,
    pub dim: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            embeddings: "fixture".into(),
            dim: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub weights: WeightsSection,
    pub sampler: SamplerSection,
    pub backend: BackendSpec,
    pub llm: LlmSection,
    pub edit: EditSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map(Self::load).unwrap_or_else(|| Ok(Self::default()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.llm.cache_dir);
        if let Some(f) = self.llm.fixtures.as_mut() {
            fix(f);
        }
        if self.eval.embeddings != "fixture" {
            let mut p = PathBuf::from(&self.eval.embeddings);
            fix(&mut p);
            self.eval.embeddings = p.display().to_string();
        }
    }

    pub fn edit_config(&self) -> EditConfig {
        EditConfig {
            weights: self.weights.resolve(),
            steps: self.sampler.steps,
            seed: self.edit.seed,
            image_size: (self.edit.width, self.edit.height),
            n_specific: self.edit.n,
            max_specific: self.edit.max_n,
            sampler: SamplerSpec {
                kind: self.sampler.kind.clone(),
                eta: self.sampler.eta,
            },
            batched: self.edit.batched,
            dump_masks: self.edit.dump_masks,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        let edit = cfg.edit_config();
        assert_eq!(edit.weights, GuidanceWeights::default());
        assert_eq!(edit.steps, 30);
        assert_eq!(edit.image_size, (512, 512));
        assert_eq!(cfg.backend.id, "mock");
        assert_eq!(cfg.edit.strategy, EditStrategy::Sane);
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml(
            r#"
            [weights]
            model = "magicbrush"
            w_text = 5.0
            [sampler]
            eta = 0.0
            steps = 10
            [backend]
            id = "mock"
            downscale = 4
            [llm]
            provider = "fixture"
            fixtures = "fx.json"
            [edit]
            strategy = "sane_avg"
            n = 2
            seed = 9
            "#,
        )
        .unwrap();
        let w = cfg.weights.resolve();
        assert_eq!((w.w_image, w.w_text, w.w_specific), (1.5, 5.0, 5.0));
        let e = cfg.edit_config();
        assert_eq!((e.steps, e.seed, e.n_specific), (10, 9, 2));
        assert_eq!(e.sampler.eta, 0.0);
        assert_eq!(cfg.edit.strategy, EditStrategy::SaneAvg);
        assert_eq!(cfg.backend.downscale, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[weights]\nw_imag = 1.0").is_err());
        assert!(RunConfig::from_toml("[edit]\nstrategy = \"magic\"").is_err());
    }

    #[test]
    fn relative_paths_resolve_against_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[llm]\nfixtures = \"fx.json\"\ncache_dir = \"cache\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.llm.fixtures.unwrap(), dir.path().join("fx.json"));
        assert_eq!(cfg.llm.cache_dir, dir.path().join("cache"));
        assert!(RunConfig::load(&dir.path().join("missing.toml")).is_err());
    }
}
