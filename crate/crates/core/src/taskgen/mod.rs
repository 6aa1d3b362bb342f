//! Synthetic instruction corpus, tokenizer, and the TF-IDF baseline.

mod generator;
pub mod tfidf;
mod tokenizer;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use generator::{generate_corpus, CorpusSpec, Semantics, SEPARATORS, SYMBOLS};
pub use tfidf::{Keyword, TfIdf};
pub use tokenizer::{Tokenizer, BOS, EOS, GIST, PAD, RESERVED, SEP};

use crate::{util, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Seen,
    Unseen,
    Ood,
}

impl Split {
    pub const EVAL: [Split; 3] = [Split::Seen, Split::Unseen, Split::Ood];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Seen => "seen",
            Split::Unseen => "unseen",
            Split::Ood => "ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One `(task, input, output)` record. An empty `input` means none.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub task: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
    pub split: Split,
    #[serde(default)]
    pub task_family: String,
}

impl InstructionExample {
    pub fn has_input(&self) -> bool {
        !self.input.trim().is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub examples: usize,
    pub unique_tasks: usize,
    pub empty_input_examples: usize,
    pub mean_task_tokens: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_examples: usize,
    pub unique_tasks: usize,
    /// Over unique tasks.
    pub empty_input_fraction: f64,
    pub mean_examples_per_task: f64,
    pub vocab_size: usize,
    pub splits: BTreeMap<Split, SplitStats>,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "examples              {}", self.num_examples)?;
        writeln!(f, "unique tasks          {}", self.unique_tasks)?;
        writeln!(f, "empty-input fraction  {:.4}", self.empty_input_fraction)?;
        writeln!(f, "examples per task     {:.2}", self.mean_examples_per_task)?;
        writeln!(f, "vocabulary            {}", self.vocab_size)?;
        writeln!(f, "{:<8} {:>8} {:>8} {:>8} {:>10}", "split", "examples", "tasks", "no-input", "task-toks")?;
        for (split, s) in &self.splits {
            writeln!(
                f,
                "{:<8} {:>8} {:>8} {:>8} {:>10.2}",
                split.name(),
                s.examples,
                s.unique_tasks,
                s.empty_input_examples,
                s.mean_task_tokens
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub examples: Vec<InstructionExample>,
    pub tokenizer: Tokenizer,
}

impl Corpus {
    pub fn new(examples: Vec<InstructionExample>) -> Self {
        let tokenizer = Tokenizer::from_texts(
            examples.iter().flat_map(|e| [e.task.as_str(), e.input.as_str(), e.output.as_str()]),
        );
        Corpus { examples, tokenizer }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &InstructionExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn stats(&self) -> CorpusStats {
        let mut tasks: HashMap<&str, bool> = HashMap::new();
        for e in &self.examples {
            *tasks.entry(&e.task).or_insert(false) |= e.has_input();
        }
        let empty = tasks.values().filter(|&&has| !has).count();
        let mut splits = BTreeMap::new();
        for split in [Split::Train, Split::Seen, Split::Unseen, Split::Ood] {
            let xs: Vec<_> = self.split(split).collect();
            if xs.is_empty() {
                continue;
            }
            let unique: HashSet<&str> = xs.iter().map(|e| e.task.as_str()).collect();
            let toks: usize = xs.iter().map(|e| e.task.split_whitespace().count()).sum();
            splits.insert(
                split,
                SplitStats {
                    examples: xs.len(),
                    unique_tasks: unique.len(),
                    empty_input_examples: xs.iter().filter(|e| !e.has_input()).count(),
                    mean_task_tokens: toks as f64 / xs.len() as f64,
                },
            );
        }
        let n = tasks.len();
        CorpusStats {
            num_examples: self.examples.len(),
            unique_tasks: n,
            empty_input_fraction: if n == 0 { 0.0 } else { empty as f64 / n as f64 },
            mean_examples_per_task: if n == 0 { 0.0 } else { self.examples.len() as f64 / n as f64 },
            vocab_size: self.tokenizer.vocab_size(),
            splits,
        }
    }

    /// Checks record and split invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Error::Format { kind: "corpus", detail: d };
        let mut train: HashMap<&str, HashSet<&str>> = HashMap::new();
        for e in self.split(Split::Train) {
            train.entry(&e.task).or_default().insert(&e.input);
        }
        for e in &self.examples {
            if e.output.trim().is_empty() {
                return Err(bad(format!("empty output for task {:?}", e.task)));
            }
            match e.split {
                Split::Train => {}
                Split::Seen => match train.get(e.task.as_str()) {
                    None => return Err(bad(format!("seen task {:?} absent from train", e.task))),
                    Some(inputs) if inputs.contains(e.input.as_str()) => {
                        return Err(bad(format!("seen example of {:?} reuses a training input", e.task)))
                    }
                    _ => {}
                },
                Split::Unseen | Split::Ood => {
                    if train.contains_key(e.task.as_str()) {
                        return Err(bad(format!("{} task {:?} occurs in train", e.split, e.task)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Keyword token for every task string, with idf fitted on the distinct
    /// training instructions.
    pub fn tfidf_compress(&self) -> Result<BTreeMap<String, u32>> {
        let train: Vec<&str> = {
            let mut seen = HashSet::new();
            self.split(Split::Train).map(|e| e.task.as_str()).filter(|t| seen.insert(*t)).collect()
        };
        if train.is_empty() {
            return Err(Error::InvalidArgument("train split is empty".into()));
        }
        let model = TfIdf::fit(train);
        let mut out = BTreeMap::new();
        for e in &self.examples {
            if out.contains_key(&e.task) {
                continue;
            }
            let kw = model.keyword(&e.task)?;
            let id = self.tokenizer.encode(&kw.word)?[0];
            out.insert(e.task.clone(), id);
        }
        Ok(out)
    }

    /// Mean task-prompt token count of `split` divided by `k`.
    pub fn compression_factor(&self, split: Split, k: usize) -> Result<f64> {
        let lens: Vec<usize> = self.split(split).map(|e| e.task.split_whitespace().count()).collect();
        compression_factor(&lens, k)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, to_jsonl(&self.examples)?.as_bytes())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = util::read_to_string(path)?;
        Ok(Corpus::new(from_jsonl(&text)?))
    }

    /// Alpaca-style records (`instruction`, `input`, `output`) as a JSON
    /// array or one object per line. Records without a `split` go to train.
    pub fn read_alpaca(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            instruction: String,
            #[serde(default)]
            input: String,
            output: String,
            #[serde(default)]
            split: Option<Split>,
        }
        let text = util::read_to_string(path)?;
        let raws: Vec<Raw> = if text.trim_start().starts_with('[') {
            serde_json::from_str(&text)?
        } else {
            text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?
        };
        let examples = raws
            .into_iter()
            .map(|r| InstructionExample {
                task: r.instruction,
                input: r.input,
                output: r.output,
                split: r.split.unwrap_or(Split::Train),
                task_family: "alpaca".into(),
            })
            .collect();
        Ok(Corpus::new(examples))
    }

    pub fn digest(&self) -> Result<String> {
        Ok(util::sha256_hex(to_jsonl(&self.examples)?.as_bytes()))
    }
}

pub fn to_jsonl(examples: &[InstructionExample]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<InstructionExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format { kind: "jsonl", detail: format!("line {}: {e}", i + 1) })
        })
        .collect()
}

pub fn compression_factor(prompt_lens: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if prompt_lens.is_empty() {
        return Err(Error::InvalidArgument("empty split".into()));
    }
    let mean = prompt_lens.iter().sum::<usize>() as f64 / prompt_lens.len() as f64;
    Ok(mean / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compression_factor_examples() {
        assert_eq!(compression_factor(&[26], 1).unwrap(), 26.0);
        assert_eq!(compression_factor(&[20, 20], 20).unwrap(), 1.0);
        assert_eq!(compression_factor(&[18, 22], 2).unwrap(), 10.0);
        assert!(compression_factor(&[], 1).is_err());
        assert!(compression_factor(&[3], 0).is_err());
    }

    #[test]
    fn default_corpus_is_valid() {
        let c = generate_corpus(&CorpusSpec::default()).unwrap();
        c.validate().unwrap();
        let s = c.stats();
        assert_eq!(s.unique_tasks, 600);
        assert!((s.empty_input_fraction - 0.59).abs() < 0.01);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&CorpusSpec::default()).unwrap();
        let b = generate_corpus(&CorpusSpec::default()).unwrap();
        assert_eq!(to_jsonl(&a.examples).unwrap(), to_jsonl(&b.examples).unwrap());
    }

    #[test]
    fn jsonl_round_trip() {
        let c = generate_corpus(&CorpusSpec { num_tasks: 40, num_examples: 200, ..CorpusSpec::default() }).unwrap();
        let text = to_jsonl(&c.examples).unwrap();
        assert_eq!(from_jsonl(&text).unwrap(), c.examples);
    }
}
