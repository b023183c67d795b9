//! Instruction specification: turning an ambiguous editing instruction and
//! a caption of the input image into an ordered list of specific
//! instructions via an LLM.
//!
//! A single LLM call asks for `max_n` instructions; smaller sets are
//! prefixes of that reply, so the set for `N` is always contained in the
//! set for any larger `N`. Successful replies are cached by
//! `(model id, prompt, attachments)`.

pub mod cache;
pub mod parse;
pub mod prompts;
pub mod provider;

use std::io::Cursor;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{cache_key, CacheRecord, PromptCache};
pub use parse::{parse_ambiguity, parse_caption_pair, parse_instruction_lines, Ambiguity, CaptionPair};
pub use provider::{FixtureProvider, FixtureRule, ImageAttachment, LlmProvider, LlmRequest, ProviderError};

pub const DEFAULT_MAX_N: usize = 3;
pub const DEFAULT_MAX_RETRIES: usize = 2;
pub const DEFAULT_CAPTION_WORDS: usize = 10;

#[derive(Debug, Error)]
pub enum SpecifierError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("instruction count must be at least 1, got {0}")]
    InvalidCount(usize),
    #[error("requested {requested} instructions but the limit is {max}")]
    TooMany { requested: usize, max: usize },
    #[error("decomposition produced {got} usable instructions, wanted {wanted}")]
    Decomposition { wanted: usize, got: usize, raw: String },
    #[error("could not parse caption pair: {reason}")]
    CaptionParse { reason: String, raw: String },
    #[error("reply does not start with a classification marker")]
    Classification { raw: String },
    #[error("unexpected reply, expected {expected}")]
    UnexpectedReply { expected: &'static str, raw: String },
    #[error("invalid instruction set: {0}")]
    InvalidSet(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
    #[error("image encoding: {0}")]
    Image(String),
}

impl SpecifierError {
    /// Raw LLM text for errors raised while parsing a reply.
    pub fn raw_output(&self) -> Option<&str> {
        match self {
            SpecifierError::Decomposition { raw, .. }
            | SpecifierError::CaptionParse { raw, .. }
            | SpecifierError::Classification { raw }
            | SpecifierError::UnexpectedReply { raw, .. } => Some(raw),
            _ => None,
        }
    }
}

/// The user's ambiguous editing instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AmbiguousInstruction(String);

impl AmbiguousInstruction {
    pub fn new(text: impl Into<String>) -> Result<Self, SpecifierError> {
        let text = text.into().trim().to_string();
        if text.is_empty() {
            return Err(SpecifierError::EmptyInstruction);
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for AmbiguousInstruction {
    type Error = SpecifierError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<AmbiguousInstruction> for String {
    fn from(value: AmbiguousInstruction) -> Self {
        value.0
    }
}

impl std::fmt::Display for AmbiguousInstruction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered specific instructions with their provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecificInstructionSet {
    instructions: Vec<String>,
    pub source_model: String,
    /// Hex SHA-256 of the prompt that produced the set.
    pub prompt_digest: String,
    pub caption: String,
}

impl SpecificInstructionSet {
    pub fn new(
        instructions: Vec<String>,
        source_model: impl Into<String>,
        prompt_digest: impl Into<String>,
        caption: impl Into<String>,
    ) -> Result<Self, SpecifierError> {
        if instructions.is_empty() {
            return Err(SpecifierError::InvalidSet("no instructions".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for inst in &instructions {
            if inst.trim().is_empty() {
                return Err(SpecifierError::InvalidSet("empty instruction".into()));
            }
            if !seen.insert(inst.to_lowercase()) {
                return Err(SpecifierError::InvalidSet(format!("duplicate instruction '{inst}'")));
            }
        }
        Ok(Self {
            instructions,
            source_model: source_model.into(),
            prompt_digest: prompt_digest.into(),
            caption: caption.into(),
        })
    }

    /// A set typed in by hand rather than produced by an LLM.
    pub fn manual(instructions: Vec<String>) -> Result<Self, SpecifierError> {
        Self::new(instructions, "manual", "", "")
    }

    pub fn instructions(&self) -> &[String] {
        &self.instructions
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// The first `n` instructions.
    pub fn prefix(&self, n: usize) -> Result<Self, SpecifierError> {
        if n == 0 {
            return Err(SpecifierError::InvalidCount(0));
        }
        if n > self.len() {
            return Err(SpecifierError::TooMany {
                requested: n,
                max: self.len(),
            });
        }
        Ok(Self {
            instructions: self.instructions[..n].to_vec(),
            ..self.clone()
        })
    }
}

pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

pub fn build_decomposition_prompt(caption: &str, c: &AmbiguousInstruction, n: usize) -> Result<String, SpecifierError> {
    if n == 0 {
        return Err(SpecifierError::InvalidCount(0));
    }
    Ok(prompts::decomposition_prompt(caption, c.as_str(), n))
}

pub fn build_caption_prompt(c: &AmbiguousInstruction, image_ref: &str) -> String {
    prompts::caption_prompt(c.as_str(), image_ref)
}

pub fn build_selection_prompt(c: &AmbiguousInstruction) -> String {
    prompts::selection_prompt(c.as_str())
}

/// Parses a decomposition reply into a set of exactly `n` instructions.
pub fn parse_specific_instructions(llm_output: &str, n: usize) -> Result<SpecificInstructionSet, SpecifierError> {
    let instructions = parse_instruction_lines(llm_output, n)?;
    SpecificInstructionSet::new(instructions, "unknown", "", "")
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, SpecifierError> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| SpecifierError::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Short reference to an image, used where a prompt names an attachment.
pub fn image_ref(image: &RgbImage) -> String {
    let digest = Sha256::digest(image.as_raw());
    format!("[image {}]", &hex::encode(digest)[..12])
}

/// Sends `request`, parsing the reply with `parse`. Cached replies are
/// reused; a provider or parse failure is retried up to `max_retries`
/// times. Only replies that parse are written to the cache.
pub fn query_with_retries<T>(
    provider: &dyn LlmProvider,
    cache: Option<&PromptCache>,
    request: &LlmRequest,
    max_retries: usize,
    parse: impl Fn(&str) -> Result<T, SpecifierError>,
) -> Result<(T, bool), SpecifierError> {
    let attachments: Vec<&[u8]> = request.images.iter().map(|i| i.png.as_slice()).collect();
    let key = cache_key(provider.model_id(), &request.prompt, &attachments);
    if let Some(hit) = cache.and_then(|c| c.get(&key)) {
        if let Ok(value) = parse(&hit.response) {
            return Ok((value, true));
        }
    }
    if !request.images.is_empty() && !provider.supports_images() {
        return Err(ProviderError::ImagesUnsupported(provider.model_id().into()).into());
    }
    let mut last_err = None;
    for _ in 0..=max_retries {
        let reply = match provider.complete(request) {
            Ok(r) => r,
            Err(e) => {
                last_err = Some(SpecifierError::from(e));
                continue;
            }
        };
        match parse(&reply) {
            Ok(value) => {
                if let Some(c) = cache {
                    c.insert(provider.model_id(), &request.prompt, key, &reply)?;
                }
                return Ok((value, false));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt is made"))
}

/// LLM-backed instruction specification with caching and bounded retries.
pub struct InstructionSpecifier {
    provider: Arc<dyn LlmProvider>,
    cache: Arc<PromptCache>,
    pub max_n: usize,
    pub max_retries: usize,
    pub caption_max_words: usize,
}

impl InstructionSpecifier {
    pub fn new(provider: Arc<dyn LlmProvider>, cache: Arc<PromptCache>) -> Self {
        Self {
            provider,
            cache,
            max_n: DEFAULT_MAX_N,
            max_retries: DEFAULT_MAX_RETRIES,
            caption_max_words: DEFAULT_CAPTION_WORDS,
        }
    }

    pub fn provider(&self) -> &dyn LlmProvider {
        self.provider.as_ref()
    }

    pub fn cache(&self) -> &PromptCache {
        &self.cache
    }

    /// One LLM request for `max_n` instructions. Returns the set and
    /// whether it was served from the cache.
    pub fn decompose_traced(
        &self,
        caption: &str,
        c: &AmbiguousInstruction,
        max_n: usize,
    ) -> Result<(SpecificInstructionSet, bool), SpecifierError> {
        if max_n > self.max_n {
            return Err(SpecifierError::TooMany {
                requested: max_n,
                max: self.max_n,
            });
        }
        let prompt = build_decomposition_prompt(caption, c, max_n)?;
        let digest = prompt_digest(&prompt);
        let request = LlmRequest::text(prompt);
        let (instructions, cached) = query_with_retries(
            self.provider.as_ref(),
            Some(&self.cache),
            &request,
            self.max_retries,
            |reply| parse_instruction_lines(reply, max_n),
        )?;
        let set = SpecificInstructionSet::new(instructions, self.provider.model_id(), digest, caption)?;
        Ok((set, cached))
    }

    pub fn decompose(
        &self,
        caption: &str,
        c: &AmbiguousInstruction,
        max_n: usize,
    ) -> Result<SpecificInstructionSet, SpecifierError> {
        self.decompose_traced(caption, c, max_n).map(|(s, _)| s)
    }

    /// Sets for every `N` in `1..=max_n`, all drawn from one request.
    pub fn decompose_nested(
        &self,
        caption: &str,
        c: &AmbiguousInstruction,
        max_n: usize,
    ) -> Result<Vec<SpecificInstructionSet>, SpecifierError> {
        let full = self.decompose(caption, c, max_n)?;
        (1..=max_n).map(|n| full.prefix(n)).collect()
    }

    pub fn caption_pair(&self, c: &AmbiguousInstruction, image: &RgbImage) -> Result<CaptionPair, SpecifierError> {
        let request = LlmRequest {
            prompt: build_caption_prompt(c, &image_ref(image)),
            images: vec![ImageAttachment {
                label: "input".into(),
                png: encode_png(image)?,
            }],
        };
        let budget = self.caption_max_words;
        query_with_retries(
            self.provider.as_ref(),
            Some(&self.cache),
            &request,
            self.max_retries,
            |reply| parse_caption_pair(reply, budget),
        )
        .map(|(pair, _)| pair)
    }

    pub fn classify_ambiguity(&self, c: &AmbiguousInstruction) -> Result<Ambiguity, SpecifierError> {
        let request = LlmRequest::text(build_selection_prompt(c));
        query_with_retries(
            self.provider.as_ref(),
            Some(&self.cache),
            &request,
            self.max_retries,
            parse_ambiguity,
        )
        .map(|(a, _)| a)
    }
}
