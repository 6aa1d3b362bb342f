//! Pairwise judgments and the gold-reference oracle judge.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numeric::rng::{derive_seed, rng};
use crate::{util, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    A,
    B,
    Tie,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    Oracle,
    External,
}

/// One pairwise comparison. `verdict` always refers to `a`/`b` as stored;
/// `swapped` records that the judge saw `b` first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub id: String,
    pub a: String,
    pub b: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub reason: Option<String>,
    pub judge: JudgeKind,
    #[serde(default)]
    pub swapped: bool,
}

/// Word-level Levenshtein distance.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<&str> = a.split_whitespace().collect();
    let b: Vec<&str> = b.split_whitespace().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Edit distance divided by the longer word count (0 for two empty strings).
pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let n = a.split_whitespace().count().max(b.split_whitespace().count());
    if n == 0 {
        0.0
    } else {
        edit_distance(a, b) as f64 / n as f64
    }
}

/// Exact match first, then normalized edit distance to the gold output.
pub fn oracle_judge(id: &str, gold: &str, a: &str, b: &str) -> Result<Judgment> {
    if gold.trim().is_empty() {
        return Err(Error::InvalidArgument(format!("example {id} has no gold output")));
    }
    let (ea, eb) = (a == gold, b == gold);
    let (da, db) = (normalized_edit_distance(a, gold), normalized_edit_distance(b, gold));
    let verdict = match (ea, eb) {
        (true, false) => Verdict::A,
        (false, true) => Verdict::B,
        (true, true) => Verdict::Tie,
        (false, false) if da < db => Verdict::A,
        (false, false) if db < da => Verdict::B,
        _ => Verdict::Tie,
    };
    Ok(Judgment {
        id: id.to_string(),
        a: a.to_string(),
        b: b.to_string(),
        verdict,
        reason: Some(format!("distance to gold: a {da:.3}, b {db:.3}")),
        judge: JudgeKind::Oracle,
        swapped: false,
    })
}

/// Judges aligned outputs, presenting each pair in a seeded random order and
/// mapping the verdict back to the stored `a`/`b`.
pub fn judge_all<S: AsRef<str>>(ids: &[S], gold: &[S], a: &[S], b: &[S], seed: u64) -> Result<Vec<Judgment>> {
    if ids.len() != gold.len() || a.len() != gold.len() || b.len() != gold.len() {
        return Err(Error::InvalidArgument("judge_all needs aligned lists".into()));
    }
    let mut r = rng(derive_seed(seed, "judge-order"));
    (0..ids.len())
        .map(|i| {
            let swapped = r.random_bool(0.5);
            let (first, second) = if swapped { (&b[i], &a[i]) } else { (&a[i], &b[i]) };
            let mut j = oracle_judge(ids[i].as_ref(), gold[i].as_ref(), first.as_ref(), second.as_ref())?;
            if swapped {
                std::mem::swap(&mut j.a, &mut j.b);
                j.verdict = match j.verdict {
                    Verdict::A => Verdict::B,
                    Verdict::B => Verdict::A,
                    Verdict::Tie => Verdict::Tie,
                };
            }
            j.swapped = swapped;
            Ok(j)
        })
        .collect()
}

pub fn write_judgments(path: &Path, judgments: &[Judgment]) -> Result<()> {
    let mut out = String::new();
    for j in judgments {
        out.push_str(&serde_json::to_string(j)?);
        out.push('\n');
    }
    util::write_atomic(path, out.as_bytes())
}

pub fn read_judgments(path: &Path) -> Result<Vec<Judgment>> {
    util::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format { kind: "judgments", detail: format!("line {}: {e}", i + 1) })
        })
        .collect()
}
