//! Tokenization and character-offset helpers shared by the index and the
//! concept linker.
//!
//! All offsets in this crate are counted in Unicode scalar values, not bytes.

use serde::{Deserialize, Serialize};

/// A normalized token with its character span in the original text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub position: usize,
}

/// Lowercases and splits on every non-alphanumeric scalar.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut idx = 0;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if current.is_empty() {
                start = idx;
            }
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            let position = tokens.len();
            tokens.push(Token {
                text: std::mem::take(&mut current),
                start,
                end: idx,
                position,
            });
        }
        idx += 1;
    }
    if !current.is_empty() {
        let position = tokens.len();
        tokens.push(Token {
            text: current,
            start,
            end: idx,
            position,
        });
    }
    tokens
}

/// Normalized form of a name: its tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text)
        .into_iter()
        .map(|t| t.text)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Slice `text` by character offsets. Returns `None` when out of range.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let b_start = indices.by_ref().nth(start)?;
    let b_end = if end == start {
        b_start
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&text[b_start..b_end])
}

/// Maps byte offsets (as produced by `regex`) to character offsets.
pub struct CharIndex {
    // char offset for every byte boundary; non-boundaries hold the next char
    byte_to_char: Vec<usize>,
}

impl CharIndex {
    pub fn new(text: &str) -> Self {
        let mut byte_to_char = vec![0; text.len() + 1];
        let mut c = 0;
        for (b, ch) in text.char_indices() {
            for slot in &mut byte_to_char[b..b + ch.len_utf8()] {
                *slot = c;
            }
            c += 1;
        }
        byte_to_char[text.len()] = c;
        Self { byte_to_char }
    }

    pub fn char_at(&self, byte: usize) -> usize {
        self.byte_to_char[byte]
    }
}
