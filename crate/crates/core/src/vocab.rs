//! Word-level vocabulary with the reserved control tokens used by the compressor/decoder.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MEM: TokenId = 3;
pub const ABSTAIN: TokenId = 4;
pub const SEP: TokenId = 5;

/// Surface form of the abstention token; identical to the drift JSONL sentinel.
pub const ABSTAIN_SYMBOL: &str = "__UNANSWERABLE__";

const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<mem>", ABSTAIN_SYMBOL, "<sep>"];

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    InvalidToken { id: TokenId, size: usize },
    #[error("duplicate symbol {0:?}")]
    DuplicateSymbol(String),
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("symbol list does not start with the reserved control symbols")]
    MissingReserved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from the reserved symbols followed by `words` in the given
    /// order (duplicates of earlier entries are skipped).
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for w in words {
            let w = w.as_ref();
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len() as TokenId);
                tokens.push(w.to_string());
            }
        }
        Self { tokens, index }
    }

    /// Sorted, deduplicated vocabulary over every token appearing in `texts`.
    pub fn from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words: Vec<String> = texts.into_iter().flat_map(|t| split_words(t)).collect();
        words.sort();
        words.dedup();
        Self::new(words)
    }

    /// Synthetic vocabulary of exactly `size` symbols (`t0`, `t1`, ...).
    pub fn synthetic(size: usize) -> Self {
        assert!(
            size > RESERVED.len(),
            "synthetic vocabulary must exceed the reserved symbols"
        );
        Self::new((0..size - RESERVED.len()).map(|i| format!("t{i}")))
    }

    /// Restores a vocabulary from its full ordered symbol list (reserved symbols first).
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self, VocabError> {
        if symbols.len() < RESERVED.len() || symbols[..RESERVED.len()] != RESERVED {
            return Err(VocabError::MissingReserved);
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as TokenId).is_some() {
                return Err(VocabError::DuplicateSymbol(s.clone()));
            }
        }
        Ok(Self {
            tokens: symbols,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(VocabError::UnknownWord(w)))
            .collect()
    }

    /// Renders ids as text, dropping the PAD/BOS/EOS/MEM/SEP control symbols.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS | MEM | SEP))
            .filter_map(|&id| self.symbol(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<(), VocabError> {
        match ids.iter().find(|&&id| id as usize >= self.len()) {
            Some(&id) => Err(VocabError::InvalidToken {
                id,
                size: self.len(),
            }),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = VocabError;
    fn try_from(symbols: Vec<String>) -> Result<Self, VocabError> {
        Self::from_symbols(symbols)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Splits text into word tokens; `.`, `,`, `?`, `!`, `;` and `:` become separate tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let mut word = String::new();
        for ch in lower.chars() {
            if matches!(ch, '.' | ',' | '?' | '!' | ';' | ':') {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// A non-empty sequence of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self, VocabError> {
        if ids.is_empty() {
            return Err(VocabError::EmptySequence);
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prefix(&self, k: usize) -> Result<Self, VocabError> {
        Self::new(self.0[..k.min(self.0.len())].to_vec())
    }

    pub fn into_vec(self) -> Vec<TokenId> {
        self.0
    }
}

impl AsRef<[TokenId]> for TokenSequence {
    fn as_ref(&self) -> &[TokenId] {
        &self.0
    }
}

impl TryFrom<Vec<TokenId>> for TokenSequence {
    type Error = VocabError;
    fn try_from(ids: Vec<TokenId>) -> Result<Self, VocabError> {
        Self::new(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_distinct_and_stable() {
        let v = Vocabulary::synthetic(64);
        assert_eq!(v.len(), 64);
        let ids = [PAD, BOS, EOS, MEM, ABSTAIN, SEP];
        for (i, id) in ids.iter().enumerate() {
            assert_eq!(*id as usize, i);
            assert_eq!(v.id(v.symbol(*id).unwrap()), Some(*id));
        }
    }

    #[test]
    fn round_trip_every_id() {
        let v = Vocabulary::from_texts(["the bee pollinated the flower .", "alice hit bob ."]);
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id(v.symbol(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn punctuation_splits() {
        assert_eq!(
            split_words("near the Bee, the fox."),
            ["near", "the", "bee", ",", "the", "fox", "."]
        );
        let v = Vocabulary::from_texts(["what is it ?"]);
        let ids = v.encode("What is it?").unwrap();
        assert_eq!(v.decode(&ids), "what is it ?");
        assert_eq!(
            v.encode("zebra"),
            Err(VocabError::UnknownWord("zebra".into()))
        );
    }

    #[test]
    fn symbols_round_trip_and_invalid_ids_rejected() {
        let v = Vocabulary::synthetic(10);
        let back = Vocabulary::from_symbols(v.symbols().to_vec()).unwrap();
        assert_eq!(back, v);
        assert!(v.check(&[0, 9]).is_ok());
        assert_eq!(
            v.check(&[10]),
            Err(VocabError::InvalidToken { id: 10, size: 10 })
        );
        assert_eq!(TokenSequence::new(vec![]), Err(VocabError::EmptySequence));
    }
}
