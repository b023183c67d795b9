use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::specifier::{
    encode_png, image_ref, prompts, query_with_retries, AmbiguousInstruction, ImageAttachment, LlmProvider, LlmRequest,
    PromptCache, SpecifierError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    A,
    B,
}

impl Verdict {
    pub fn flipped(self) -> Self {
        match self {
            Verdict::A => Verdict::B,
            Verdict::B => Verdict::A,
        }
    }
}

/// Accepts a lone `A` or `B`, ignoring surrounding whitespace, case and a
/// trailing period.
pub fn parse_verdict(reply: &str) -> Result<Verdict, EvalError> {
    let s = reply.trim();
    let s = s.strip_suffix('.').unwrap_or(s).trim();
    match s {
        "A" | "a" => Ok(Verdict::A),
        "B" | "b" => Ok(Verdict::B),
        _ => Err(EvalError::Evaluation(format!("expected `A` or `B`, got {reply:?}"))),
    }
}

/// Asks the provider which of two edits of `original` is better.
pub fn gpt_preference(
    provider: &dyn LlmProvider,
    cache: Option<&PromptCache>,
    original: &RgbImage,
    edit_a: &RgbImage,
    edit_b: &RgbImage,
    c: &AmbiguousInstruction,
    max_retries: usize,
) -> Result<Verdict, EvalError> {
    if !provider.supports_images() {
        return Err(EvalError::Evaluation(format!(
            "provider '{}' cannot receive images",
            provider.model_id()
        )));
    }
    let prompt = prompts::preference_prompt(c.as_str(), &image_ref(original), &image_ref(edit_a), &image_ref(edit_b));
    let images = [("original", original), ("A", edit_a), ("B", edit_b)]
        .into_iter()
        .map(|(label, img)| {
            Ok(ImageAttachment {
                label: label.into(),
                png: encode_png(img)?,
            })
        })
        .collect::<Result<Vec<_>, SpecifierError>>()?;
    let request = LlmRequest { prompt, images };
    let result = query_with_retries(provider, cache, &request, max_retries, |reply| {
        parse_verdict(reply).map_err(|_| SpecifierError::UnexpectedReply {
            expected: "A or B",
            raw: reply.to_string(),
        })
    });
    match result {
        Ok((v, _)) => Ok(v),
        Err(SpecifierError::UnexpectedReply { raw, .. }) => Err(EvalError::Evaluation(format!(
            "preference reply was not A or B after {} attempts: {raw:?}",
            max_retries + 1
        ))),
        Err(e) => Err(e.into()),
    }
}

/// Verdicts from both presentation orders of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    /// `first` shown as A.
    pub forward: Verdict,
    /// `second` shown as A.
    pub swapped: Verdict,
}

impl PreferenceRecord {
    /// Whether the two runs agree on the same image.
    pub fn consistent(&self) -> bool {
        self.swapped == self.forward.flipped()
    }

    /// `Some(true)` when both runs prefer `first`, `Some(false)` when both
    /// prefer `second`, `None` on disagreement.
    pub fn prefers_first(&self) -> Option<bool> {
        self.consistent().then_some(self.forward == Verdict::A)
    }
}

/// Runs the comparison twice with A and B swapped and records both verdicts.
pub fn preference_with_swap(
    provider: &dyn LlmProvider,
    cache: Option<&PromptCache>,
    original: &RgbImage,
    first: &RgbImage,
    second: &RgbImage,
    c: &AmbiguousInstruction,
    max_retries: usize,
) -> Result<PreferenceRecord, EvalError> {
    Ok(PreferenceRecord {
        forward: gpt_preference(provider, cache, original, first, second, c, max_retries)?,
        swapped: gpt_preference(provider, cache, original, second, first, c, max_retries)?,
    })
}
