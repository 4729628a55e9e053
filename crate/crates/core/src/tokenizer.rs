//! Whitespace vocabulary with reserved special tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[EOS]", "[UNK]"];

/// Smallest `max_size` accepted by [`build_vocab`]: the specials plus one token.
pub const MIN_VOCAB_SIZE: usize = SPECIAL_TOKENS.len() + 1;

/// Anything that maps text to ids and back. [`Vocab`] is the built-in
/// implementation; external tokenizers plug in here.
pub trait Tokenizer {
    fn encode(&self, text: &str, max_len: usize) -> Vec<usize>;
    fn decode(&self, ids: &[usize]) -> Result<String>;
    fn vocab_size(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(Error::Schema(
                "vocabulary must start with the five special tokens".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if token_to_id.insert(token.clone(), id).is_some() {
                return Err(Error::Schema(format!("duplicate vocabulary entry {token:?}")));
            }
        }
        Ok(Self {
            id_to_token: tokens,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.id_to_token.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Builds a vocabulary ranked by whitespace-token frequency, ties broken
/// lexicographically. `max_size` counts the five specials.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    if max_size < MIN_VOCAB_SIZE {
        return Err(Error::Param(format!(
            "max_size must be at least {MIN_VOCAB_SIZE}, got {max_size}"
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for text in corpus {
        for tok in text.as_ref().split_whitespace() {
            if !SPECIAL_TOKENS.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(
            ranked
                .into_iter()
                .take(max_size - SPECIAL_TOKENS.len())
                .map(|(t, _)| t.to_string()),
        )
        .collect();
    Vocab::from_tokens(tokens)
}

impl Tokenizer for Vocab {
    /// Whitespace split, UNK for unknown tokens, right truncation that keeps
    /// a trailing EOS.
    fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let max_len = max_len.max(1);
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect();
        if ids.len() > max_len {
            let ends_with_eos = ids.last() == Some(&EOS);
            ids.truncate(max_len);
            if ends_with_eos {
                ids[max_len - 1] = EOS;
            }
        }
        ids
    }

    /// Drops PAD and stops at the first EOS.
    fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out: Vec<&str> = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            let token = self.token(id).ok_or(Error::Decode(id))?;
            if id != PAD {
                out.push(token);
            }
        }
        Ok(out.join(" "))
    }

    fn vocab_size(&self) -> usize {
        self.len()
    }
}
