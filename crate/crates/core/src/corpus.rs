//! Character-level vocabulary, packing and detokenization.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::kernel::TokenSeq;
use crate::{Error, Result};

/// Rendering of the mask token in detokenized text.
pub const MASK_TEXT: &str = "[MASK]";

/// Sorted unique characters get ids `0..C`; the mask is id `C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

/// On-disk form: `{"chars": "...", "mask_id": C}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    chars: String,
    mask_id: usize,
}

impl CharVocab {
    pub fn build(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Empty("vocabulary text"));
        }
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Ok(Self::from_chars(chars))
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { chars, index }
    }

    pub fn mask_id(&self) -> usize {
        self.chars.len()
    }

    /// Number of tokens including the mask.
    pub fn vocab_size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        text.chars()
            .map(|c| {
                self.id(c).ok_or_else(|| {
                    Error::Domain(format!("character {c:?} is not in the vocabulary"))
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSeq)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if id == self.mask_id() {
                out.push_str(MASK_TEXT);
            } else if let Some(&c) = self.chars.get(id) {
                out.push(c);
            } else {
                return Err(Error::Index {
                    index: id,
                    vocab_size: self.vocab_size(),
                });
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VocabFile {
            chars: self.chars.iter().collect(),
            mask_id: self.mask_id(),
        })?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        let chars: Vec<char> = file.chars.chars().collect();
        let vocab = Self::from_chars(chars);
        if vocab.index.len() != vocab.chars.len() {
            return Err(Error::Config("vocabulary characters are not unique".into()));
        }
        if file.mask_id != vocab.mask_id() {
            return Err(Error::Config(format!(
                "mask id {} does not follow the {} characters",
                file.mask_id,
                vocab.chars.len()
            )));
        }
        Ok(vocab)
    }
}

/// Splits `text` into contiguous non-overlapping windows of `seq_len`; the partial tail is dropped.
pub fn pack(text: &str, vocab: &CharVocab, seq_len: usize) -> Result<Vec<TokenSeq>> {
    if seq_len == 0 {
        return Err(Error::Domain("sequence length must be at least 1".into()));
    }
    let ids = vocab.tokenize(text)?;
    Ok(ids
        .0
        .chunks_exact(seq_len)
        .map(|w| TokenSeq(w.to_vec()))
        .collect())
}

pub fn read_corpus(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
