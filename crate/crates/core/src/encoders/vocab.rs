//! Whitespace tokenizer with a frequency-ordered vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Bijective map between token strings and ids >= 2; ids 0 and 1 are
/// reserved for padding and unknown tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

/// Lowercases, maps every non-alphanumeric character to a space, and
/// splits on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus. Tokens with frequency below
    /// `min_freq` map to UNK; surviving tokens get ids in descending
    /// frequency order with ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for tok in normalize_tokens(doc.as_ref()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
        id_to_token.extend(kept.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    /// Reconstructs a vocabulary from its id-ordered token list
    /// (everything from id 2 upward), as stored in checkpoints.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    /// Tokens with ids 2.., in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[2..]
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }
}

/// Maps `text` to ids, truncates to `max_len`, pads with PAD, and
/// reports the valid (pre-padding) length.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> (Vec<usize>, usize) {
    let mut ids: Vec<usize> = normalize_tokens(text)
        .iter()
        .map(|t| vocab.id(t))
        .take(max_len)
        .collect();
    let valid = ids.len();
    ids.resize(max_len, PAD_ID);
    (ids, valid)
}
