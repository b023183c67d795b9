//! Parsers for LLM replies. They never panic; malformed replies become
//! [`SpecifierError`] values carrying the raw text.

use serde::{Deserialize, Serialize};

use super::SpecifierError;

/// Outcome of the ambiguity classification prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ambiguity {
    Ambiguous,
    Specific,
}

/// Initial and final scene captions used by the directional metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub initial: String,
    pub final_caption: String,
}

const QUOTES: &[char] = &['"', '\'', '`', '“', '”', '‘', '’'];

fn strip_list_marker(line: &str) -> &str {
    let mut s = line.trim_start();
    loop {
        let before = s;
        if let Some(rest) = s.strip_prefix(['-', '*', '•', '–', '—']) {
            s = rest.trim_start();
        }
        let digits = s.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 {
            if let Some(rest) = s[digits..].strip_prefix(['.', ')', ':']) {
                s = rest.trim_start();
            }
        }
        if s == before {
            return s;
        }
    }
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

fn strip_wrapping_quotes(s: &str) -> &str {
    let s = s.trim();
    let mut chars = s.chars();
    match (chars.next(), chars.next_back()) {
        (Some(a), Some(b)) if QUOTES.contains(&a) && QUOTES.contains(&b) && s.chars().count() >= 2 => {
            s[a.len_utf8()..s.len() - b.len_utf8()].trim()
        }
        _ => s,
    }
}

/// Normalizes one reply line into a candidate instruction, or `None` when
/// the line carries no instruction.
fn clean_instruction_line(line: &str) -> Option<String> {
    let mut s = strip_list_marker(line);
    if let Some(rest) = strip_prefix_ci(s, "suggested output:") {
        s = rest.trim_start();
    }
    // Echoed in-context scaffolding.
    if strip_prefix_ci(s, "caption:").is_some() || strip_prefix_ci(s, "ambiguous instruction").is_some() {
        return None;
    }
    let s = strip_wrapping_quotes(s);
    (!s.is_empty()).then(|| s.to_string())
}

/// Splits a decomposition reply into its first `n` distinct instructions.
pub fn parse_instruction_lines(output: &str, n: usize) -> Result<Vec<String>, SpecifierError> {
    if n == 0 {
        return Err(SpecifierError::InvalidCount(n));
    }
    let mut seen = std::collections::HashSet::new();
    let mut instructions = Vec::with_capacity(n);
    for line in output.lines() {
        let Some(inst) = clean_instruction_line(line) else {
            continue;
        };
        if seen.insert(inst.to_lowercase()) {
            instructions.push(inst);
            if instructions.len() == n {
                return Ok(instructions);
            }
        }
    }
    Err(SpecifierError::Decomposition {
        wanted: n,
        got: instructions.len(),
        raw: output.to_string(),
    })
}

fn numbered_item(line: &str, number: char) -> Option<&str> {
    let s = line.trim_start();
    let rest = s.strip_prefix(number)?;
    rest.strip_prefix(['.', ')']).map(str::trim)
}

/// Parses the two-line `1. "..."` / `2. "..."` captioning reply.
pub fn parse_caption_pair(output: &str, max_words: usize) -> Result<CaptionPair, SpecifierError> {
    let fail = |reason: String| SpecifierError::CaptionParse {
        reason,
        raw: output.to_string(),
    };
    let mut initial = None;
    let mut final_caption = None;
    for line in output.lines() {
        if initial.is_none() {
            if let Some(c) = numbered_item(line, '1') {
                initial = Some(strip_wrapping_quotes(c).to_string());
                continue;
            }
        }
        if final_caption.is_none() {
            if let Some(c) = numbered_item(line, '2') {
                final_caption = Some(strip_wrapping_quotes(c).to_string());
            }
        }
    }
    let initial = initial.ok_or_else(|| fail("missing line `1.`".into()))?;
    let final_caption = final_caption.ok_or_else(|| fail("missing line `2.`".into()))?;
    for (label, caption) in [("initial", &initial), ("final", &final_caption)] {
        if caption.is_empty() {
            return Err(fail(format!("{label} caption is empty")));
        }
        let words = caption.split_whitespace().count();
        if words > max_words {
            return Err(fail(format!(
                "{label} caption has {words} words, budget is {max_words}"
            )));
        }
    }
    Ok(CaptionPair { initial, final_caption })
}

/// Finds the first `Response: ambiguous` / `Response: specific` marker,
/// ignoring case, spacing and quotes.
pub fn parse_ambiguity(output: &str) -> Result<Ambiguity, SpecifierError> {
    let lower = output.to_lowercase();
    let mut from = 0;
    while let Some(pos) = lower[from..].find("response:") {
        let after = lower[from + pos + "response:".len()..]
            .trim_start_matches(|c: char| c.is_whitespace() || QUOTES.contains(&c));
        if after.starts_with("ambiguous") {
            return Ok(Ambiguity::Ambiguous);
        }
        if after.starts_with("specific") {
            return Ok(Ambiguity::Specific);
        }
        from += pos + 1;
    }
    Err(SpecifierError::Classification {
        raw: output.to_string(),
    })
}
