//! TF-IDF keyword compression of instructions.
//!
//! Terms are lowercased words with non-alphanumeric characters stripped.
//! `tf` is the raw count in the instruction and `idf = ln(N / (1 + df))`
//! over the fitted instruction set. Among equal scores the lexicographically
//! lowest term wins. No stopword list is applied; real instruction data
//! would want one.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::{Error, Result};

/// `(term, first original word spelling it)` for every word of `text`.
pub fn terms(text: &str) -> Vec<(String, &str)> {
    text.split_whitespace()
        .filter_map(|w| {
            let t: String = w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect();
            (!t.is_empty()).then_some((t, w))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyword {
    pub term: String,
    /// Original spelling of the term's first occurrence.
    pub word: String,
    pub score: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TfIdf {
    num_docs: usize,
    df: HashMap<String, usize>,
}

impl TfIdf {
    pub fn fit<'a>(instructions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut model = TfIdf::default();
        for doc in instructions {
            model.num_docs += 1;
            let distinct: HashSet<String> = terms(doc).into_iter().map(|(t, _)| t).collect();
            for t in distinct {
                *model.df.entry(t).or_default() += 1;
            }
        }
        model
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        (self.num_docs as f64 / (1.0 + self.df(term) as f64)).ln()
    }

    /// Score of every distinct term in `instruction`, sorted by term.
    pub fn scores(&self, instruction: &str) -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for (t, _) in terms(instruction) {
            *tf.entry(t).or_default() += 1;
        }
        tf.into_iter().map(|(t, n)| {
            let s = n as f64 * self.idf(&t);
            (t, s)
        }).collect()
    }

    pub fn keyword(&self, instruction: &str) -> Result<Keyword> {
        let mut best: Option<(String, f64)> = None;
        // BTreeMap order makes the first maximum the lowest term.
        for (t, s) in self.scores(instruction) {
            if best.as_ref().is_none_or(|(_, b)| s > *b) {
                best = Some((t, s));
            }
        }
        let (term, score) = best.ok_or_else(|| Error::InvalidArgument("empty instruction".into()))?;
        let word = terms(instruction)
            .into_iter()
            .find(|(t, _)| *t == term)
            .map(|(_, w)| w.to_string())
            .expect("keyword comes from the instruction");
        Ok(Keyword { term, word, score })
    }
}
