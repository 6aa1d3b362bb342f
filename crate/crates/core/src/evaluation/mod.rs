//! Output metrics, pairwise judgments, win rates, and the distillation gap.

mod binomial;
mod judge;

use serde::{Deserialize, Serialize};

pub use binomial::{binomial_cdf, clopper_pearson};
pub use judge::{
    edit_distance, judge_all, normalized_edit_distance, oracle_judge, read_judgments, write_judgments, JudgeKind,
    Judgment, Verdict,
};

use crate::masking::{decoder_mask, MaskMode, TokenSequence};
use crate::model::{forward, ModelConfig, Params};
use crate::{Error, Result};

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure; `beta` weights recall over precision.
pub fn rouge_l_beta<T: PartialEq>(candidate: &[T], reference: &[T], beta: f64) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = beta * beta;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    rouge_l_beta(candidate, reference, 1.0)
}

/// Fraction of positions where the two lists hold identical strings.
pub fn exact_match_rate<S: AsRef<str>>(a: &[S], b: &[S]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("{} vs {} outputs", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("no outputs".into()));
    }
    let hits = a.iter().zip(b).filter(|(x, y)| x.as_ref() == y.as_ref()).count();
    Ok(hits as f64 / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub win_rate_with_ties_split: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl WinRateReport {
    pub fn n(&self) -> usize {
        self.wins + self.losses + self.ties
    }

    /// Wins with half the ties, rounded down against the challenger.
    pub fn effective_wins(&self) -> usize {
        self.wins + self.ties / 2
    }
}

/// Win rate of model `a` with a 95% Clopper-Pearson interval.
pub fn win_rate_counts(wins: usize, losses: usize, ties: usize) -> Result<WinRateReport> {
    let n = wins + losses + ties;
    if n == 0 {
        return Err(Error::InvalidArgument("no judgments".into()));
    }
    let eff = wins + ties / 2;
    let (ci_low, ci_high) = clopper_pearson(eff as u64, n as u64, 0.05);
    Ok(WinRateReport { wins, losses, ties, win_rate_with_ties_split: eff as f64 / n as f64, ci_low, ci_high })
}

pub fn win_rate(judgments: &[Judgment]) -> Result<WinRateReport> {
    let count = |v| judgments.iter().filter(|j| j.verdict == v).count();
    win_rate_counts(count(Verdict::A), count(Verdict::B), count(Verdict::Tie))
}

/// Affine map sending `neg` to 0 and `pos` to 1, not clipped.
pub fn normalize(score: f64, neg: f64, pos: f64) -> Option<f64> {
    (pos != neg).then(|| (score - neg) / (pos - neg))
}

/// A model plus the sequence it should see for one example.
pub struct GapView<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Params,
    pub ids: &'a [u32],
    pub mode: MaskMode,
}

/// Next-token distributions at the last `n` positions that predict output
/// tokens (the rows preceding each of the final `n` ids).
fn output_distributions(view: &GapView<'_>, n: usize) -> Result<Vec<Vec<f64>>> {
    let len = view.ids.len();
    if n == 0 || n >= len {
        return Err(Error::InvalidArgument(format!("{n} output tokens in a sequence of {len}")));
    }
    let mask = decoder_mask(&[view.ids], view.cfg.gist_id, view.cfg.pad_id, view.mode);
    let seq = TokenSequence::new(view.ids.to_vec(), view.cfg.gist_id, view.cfg.pad_id);
    let out = forward(view.cfg, view.params, &seq, Some(&mask), None)?;
    Ok((len - 1 - n..len - 1).map(|r| log_softmax(out.logits.row(r))).collect())
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// `KL(p || q)` from log-probabilities; clamped below at zero.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = log_p.iter().zip(log_q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum();
    kl.max(0.0)
}

/// Mean over the final `output_len` predicted tokens of
/// `KL(p_teacher || p_student)`, conditioning both on the gold trajectory.
pub fn distillation_gap_example(teacher: &GapView<'_>, student: &GapView<'_>, output_len: usize) -> Result<f64> {
    if teacher.cfg.vocab_size != student.cfg.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "vocabulary mismatch: {} vs {}",
            teacher.cfg.vocab_size, student.cfg.vocab_size
        )));
    }
    let p = output_distributions(teacher, output_len)?;
    let q = output_distributions(student, output_len)?;
    Ok(p.iter().zip(&q).map(|(a, b)| kl_divergence(a, b)).sum::<f64>() / output_len as f64)
}
