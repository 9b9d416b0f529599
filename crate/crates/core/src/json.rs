//! Pulls the first JSON object or array out of a model completion.
//!
//! Completions arrive wrapped in Markdown fences, prefixed with chatter, or
//! followed by explanations. A fenced block is tried first; otherwise every
//! `{` / `[` is tried as a start position in turn and the first one that
//! parses as a complete value wins. Trailing text after that value is ignored.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JsonExtractError {
    #[error("no JSON object or array found in completion")]
    NoJsonFound,
    #[error("malformed JSON at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
}

pub fn extract_json(text: &str) -> Result<Value, JsonExtractError> {
    if let Some((body, base)) = fenced_block(text) {
        if let Ok(v) = first_value(body, base) {
            return Ok(v);
        }
    }
    first_value(text, 0)
}

/// Content of the first Markdown code fence, with its byte offset in `text`.
fn fenced_block(text: &str) -> Option<(&str, usize)> {
    let open = line_start_fence(text, 0)?;
    let after_tag = text[open..].find('\n').map(|n| open + n + 1)?;
    let close = line_start_fence(text, after_tag).unwrap_or(text.len());
    Some((&text[after_tag..close], after_tag))
}

fn line_start_fence(text: &str, from: usize) -> Option<usize> {
    let mut pos = from;
    while let Some(rel) = text[pos..].find("```") {
        let at = pos + rel;
        let before = text[..at].trim_end_matches([' ', '\t']);
        if before.is_empty() || before.ends_with('\n') {
            return Some(at);
        }
        pos = at + 3;
    }
    None
}

fn first_value(text: &str, base: usize) -> Result<Value, JsonExtractError> {
    let mut first_err = None;
    for (start, ch) in text.char_indices() {
        if ch != '{' && ch != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v)) => return Ok(v),
            Some(Err(e)) if first_err.is_none() => {
                let offset = base + start + byte_offset(&text[start..], e.line(), e.column());
                first_err = Some(JsonExtractError::Malformed {
                    offset,
                    message: e.to_string(),
                });
            }
            _ => {}
        }
    }
    Err(first_err.unwrap_or(JsonExtractError::NoJsonFound))
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}
