//! Tokenization and the word vocabulary shared by models and metrics.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials first, then every distinct token of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let words = SPECIALS.iter().map(|s| s.to_string()).chain(distinct).collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Drops specials and stops at the first end token.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&t| t != EOS)
            .filter(|&&t| t > UNK)
            .filter_map(|&t| self.words.get(t as usize).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub(crate) fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_normalizes() {
        assert_eq!(tokenize("  So CUTE!!  wow, ...  "), ["so", "cute", "wow"]);
        assert!(tokenize("?! ..").is_empty());
    }

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::build(["so cute", "wow so"]);
        assert_eq!(v.len(), 4 + 3);
        let ids = v.encode("wow so cute zebra");
        assert_eq!(*ids.last().unwrap(), UNK);
        assert_eq!(v.decode(&[v.id("wow"), v.id("so"), EOS, v.id("cute")]), "wow so");
    }
}
