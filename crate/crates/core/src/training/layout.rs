//! Token layout of one example under each training condition.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::masking::{decoder_mask, GistMask, MaskMode};
use crate::taskgen::{InstructionExample, Tokenizer, GIST, PAD, SEP};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    /// `t, g×k, x` under the gist mask.
    Gist,
    /// `t, g, x` under a plain causal mask.
    Positive,
    /// `g, x`: the task is withheld.
    Negative,
    /// `keyword, g, x` under a plain causal mask.
    Tfidf,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Positive, Condition::Gist, Condition::Tfidf, Condition::Negative];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Gist => "gist",
            Condition::Positive => "positive",
            Condition::Negative => "negative",
            Condition::Tfidf => "tfidf",
        }
    }

    pub fn mask_mode(self) -> MaskMode {
        match self {
            Condition::Gist => MaskMode::Gist,
            _ => MaskMode::Causal,
        }
    }

    /// Gist tokens inserted; controls always get exactly one.
    pub fn gist_count(self, k: usize) -> usize {
        match self {
            Condition::Gist => k,
            _ => 1,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gist" => Ok(Condition::Gist),
            "positive" | "pos" => Ok(Condition::Positive),
            "negative" | "neg" => Ok(Condition::Negative),
            "tfidf" | "tf-idf" => Ok(Condition::Tfidf),
            _ => Err(Error::InvalidArgument(format!("unknown condition {s:?}"))),
        }
    }
}

/// Everything needed to turn examples into token ids for one condition.
#[derive(Clone, Copy)]
pub struct Layout<'a> {
    pub condition: Condition,
    pub k: usize,
    pub tokenizer: &'a Tokenizer,
    /// Keyword token per task; required by the TF-IDF condition.
    pub keywords: Option<&'a BTreeMap<String, u32>>,
}

impl Layout<'_> {
    /// Ids up to and including the separator that precedes the output.
    pub fn prompt_ids(&self, ex: &InstructionExample) -> Result<Vec<u32>> {
        let mut ids = match self.condition {
            Condition::Gist | Condition::Positive => self.tokenizer.encode(&ex.task)?,
            Condition::Negative => Vec::new(),
            Condition::Tfidf => {
                let kw = self
                    .keywords
                    .ok_or_else(|| Error::Config("tfidf condition needs keyword table".into()))?;
                let id = kw
                    .get(&ex.task)
                    .ok_or_else(|| Error::InvalidArgument(format!("no keyword for task {:?}", ex.task)))?;
                vec![*id]
            }
        };
        ids.extend(std::iter::repeat_n(GIST, self.condition.gist_count(self.k)));
        ids.extend(self.tokenizer.encode(&ex.input)?);
        ids.push(SEP);
        Ok(ids)
    }

    /// Full training sequence and the number of supervised (final) tokens.
    pub fn sequence(&self, ex: &InstructionExample) -> Result<(Vec<u32>, usize)> {
        let mut ids = self.prompt_ids(ex)?;
        let out = self.tokenizer.encode_output(&ex.output)?;
        let n = out.len();
        ids.extend(out);
        Ok((ids, n))
    }
}

/// Right-padded ids, attention mask, and next-token targets for a batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub mask: GistMask,
    /// Flattened `[batch * seq]` next-token targets.
    pub targets: Vec<usize>,
    /// Rows whose target is an output token.
    pub keep: Vec<bool>,
}

impl Batch {
    pub fn seq_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn supervised(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

pub fn build_batch(examples: &[&InstructionExample], layout: &Layout<'_>, max_seq_len: usize) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let seqs = examples.iter().map(|e| layout.sequence(e)).collect::<Result<Vec<_>>>()?;
    let len = seqs.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
    if len > max_seq_len {
        return Err(Error::ContextOverflow { len, max: max_seq_len });
    }
    let mut ids = Vec::with_capacity(seqs.len());
    let mut targets = Vec::with_capacity(seqs.len() * len);
    let mut keep = Vec::with_capacity(seqs.len() * len);
    for (s, n_out) in seqs {
        let first_target = s.len() - n_out;
        for i in 0..len {
            let t = i + 1;
            let supervised = t >= first_target && t < s.len();
            targets.push(if supervised { s[t] as usize } else { 0 });
            keep.push(supervised);
        }
        let mut padded = s;
        padded.resize(len, PAD);
        ids.push(padded);
    }
    let mask = decoder_mask(&ids, GIST, PAD, layout.condition.mask_mode());
    Ok(Batch { ids, mask, targets, keep })
}
