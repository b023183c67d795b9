//! LLM prompt templates and single-pass placeholder substitution.

pub const DECOMPOSITION: &str = include_str!("../../assets/prompts/decomposition.txt");
pub const CAPTIONING: &str = include_str!("../../assets/prompts/captioning.txt");
pub const PREFERENCE: &str = include_str!("../../assets/prompts/preference.txt");
pub const SELECTION: &str = include_str!("../../assets/prompts/selection.txt");

/// Replaces `<name>` placeholders in one left-to-right pass, so substituted
/// values are never re-scanned. Unknown `<...>` spans are left untouched.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    'scan: while let Some(open) = rest.find('<') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (name, value) in vars {
            let token_len = name.len() + 2;
            if tail.len() >= token_len && tail[1..].starts_with(name) && tail.as_bytes()[token_len - 1] == b'>' {
                out.push_str(value);
                rest = &tail[token_len..];
                continue 'scan;
            }
        }
        out.push('<');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

pub fn decomposition_prompt(caption: &str, instruction: &str, n: usize) -> String {
    let n = n.to_string();
    render(DECOMPOSITION, &[("caption", caption), ("c", instruction), ("N", &n)])
}

pub fn caption_prompt(instruction: &str, image_ref: &str) -> String {
    render(CAPTIONING, &[("c", instruction), ("x", image_ref)])
}

pub fn selection_prompt(instruction: &str) -> String {
    render(SELECTION, &[("c", instruction)])
}

pub fn preference_prompt(instruction: &str, original: &str, edit_a: &str, edit_b: &str) -> String {
    render(
        PREFERENCE,
        &[("c", instruction), ("x_a", edit_a), ("x_b", edit_b), ("x", original)],
    )
}
