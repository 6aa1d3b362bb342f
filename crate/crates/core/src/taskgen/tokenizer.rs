//! Word-level tokenizer with reserved control ids.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const GIST: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SEP: u32 = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<gist>", "<bos>", "<eos>", "<sep>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Reserved ids first, then every distinct whitespace-separated word in
    /// sorted order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        let words = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(distinct.into_iter().filter(|w| !RESERVED.contains(w)).map(str::to_string))
            .collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Tokenizer { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied().filter(|&id| id as usize >= RESERVED.len())
    }

    /// Reserved spellings such as `<gist>` are rejected like any unknown word.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::OutOfVocabulary(w.to_string())))
            .collect()
    }

    /// Output ids followed by the end-of-sequence id.
    pub fn encode_output(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.encode(text)?;
        ids.push(EOS);
        Ok(ids)
    }

    /// Joins words with single spaces; control ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id as usize >= RESERVED.len())
            .filter_map(|&id| self.words.get(id as usize).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }
}

impl From<Vec<String>> for Tokenizer {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.words
    }
}
