//! Fixed template vocabulary and prompt encodings.

use crate::error::{ensure, Error, Result};

/// Token strings, indexed by token id.
pub const VOCABULARY: &[&str] = &[
    "<null>",
    "<pad>",
    "a",
    "photo",
    "of",
    "surface-a",
    "surface-b",
    "with",
    "defect",
    "scratch",
    "spot",
    "clean",
    "<placeholder>",
];

pub const NULL_TOKEN: u16 = 0;
pub const PAD_TOKEN: u16 = 1;
pub const PLACEHOLDER_TOKEN: u16 = 12;

pub fn token_id(word: &str) -> Option<u16> {
    VOCABULARY.iter().position(|w| *w == word).map(|i| i as u16)
}

/// A padded token sequence, with an optional vector that fills every
/// placeholder slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoding {
    tokens: Vec<u16>,
    concept: Option<Vec<f32>>,
}

impl PromptEncoding {
    /// Parse whitespace-separated template words. `S*` or any `<name>` not in
    /// the vocabulary denotes the placeholder slot.
    pub fn parse(text: &str, context_len: usize) -> Result<Self> {
        let mut tokens = Vec::new();
        for word in text.split_whitespace() {
            let id = match token_id(word) {
                Some(id) => id,
                None if word == "S*" || (word.starts_with('<') && word.ends_with('>')) => {
                    PLACEHOLDER_TOKEN
                }
                None => return Err(Error::Parameter(format!("word {word:?} is not in the vocabulary"))),
            };
            tokens.push(id);
        }
        ensure!(
            tokens.len() <= context_len,
            Error::Parameter(format!(
                "prompt has {} tokens, context holds {context_len}",
                tokens.len()
            ))
        );
        ensure!(
            tokens.iter().filter(|&&t| t == PLACEHOLDER_TOKEN).count() <= 1,
            Error::Parameter("at most one placeholder slot per prompt".into())
        );
        tokens.resize(context_len, PAD_TOKEN);
        Ok(PromptEncoding {
            tokens,
            concept: None,
        })
    }

    /// The reserved unconditional prompt.
    pub fn null(context_len: usize) -> Self {
        let mut tokens = vec![PAD_TOKEN; context_len];
        tokens[0] = NULL_TOKEN;
        PromptEncoding {
            tokens,
            concept: None,
        }
    }

    pub fn with_concept(mut self, vector: Vec<f32>) -> Self {
        self.concept = Some(vector);
        self
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn concept(&self) -> Option<&[f32]> {
        self.concept.as_deref()
    }

    pub fn placeholder_slot(&self) -> Option<usize> {
        self.tokens.iter().position(|&t| t == PLACEHOLDER_TOKEN)
    }

    pub fn is_null(&self) -> bool {
        self.tokens.first() == Some(&NULL_TOKEN)
    }
}
