use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::TokenId;
use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";

/// Whitespace tokenizer over a fixed word list. Unknown words map to the
/// `<unk>` entry, which is always id 0.
#[derive(Debug, Clone, PartialEq)]
pub struct WordTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl WordTokenizer {
    pub fn new<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut vocab = vec![UNK_TOKEN.to_string()];
        for w in words {
            let w = w.into();
            if w != UNK_TOKEN {
                vocab.push(w);
            }
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Argument(format!("vocabulary entry {w:?} is not a single word")));
            }
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::Argument(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { vocab, index })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token_id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(0))
            .collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.vocab.get(t as usize).map(String::as_str).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn words(&self) -> &[String] {
        &self.vocab
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.vocab.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }
}
