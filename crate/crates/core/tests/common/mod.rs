//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use gistkit::cache::compress_prompt;
use gistkit::masking::{decoder_mask, MaskMode, TokenSequence};
use gistkit::model::{forward, ModelConfig, Params};

pub const GIST: u32 = 1;
pub const PAD: u32 = 0;

/// Every sequence of `len` tokens over {other, gist, pad}.
pub fn all_sequences(len: usize, other: u32) -> impl Iterator<Item = Vec<u32>> {
    let alphabet = [other, GIST, PAD];
    (0..3usize.pow(len as u32)).map(move |mut code| {
        (0..len)
            .map(|_| {
                let t = alphabet[code % 3];
                code /= 3;
                t
            })
            .collect()
    })
}

/// Full-table LCS, filled from the end of both strings.
pub fn lcs_table<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] { 1 + t[i + 1][j + 1] } else { t[i + 1][j].max(t[i][j + 1]) };
        }
    }
    t[0][0]
}

/// ROUGE-L F1 from the LCS oracle.
pub fn rouge_l_oracle<T: PartialEq>(cand: &[T], reference: &[T]) -> f64 {
    let l = lcs_table(cand, reference);
    if l == 0 {
        0.0
    } else {
        2.0 * l as f64 / (cand.len() + reference.len()) as f64
    }
}

/// 95% intervals from mpmath (30 digits) by root-finding on the regularized
/// incomplete beta function.
pub const BETA_QUANTILES: [(u64, u64, f64, f64); 12] = [
    (0, 10, 0.0, 0.308497107818761),
    (10, 10, 0.691502892181239, 1.0),
    (5, 10, 0.187086028447399, 0.812913971552601),
    (1, 10, 0.00252857854446178, 0.445016117028195),
    (3, 17, 0.037985068070626, 0.434317872844284),
    (50, 100, 0.398321129503301, 0.601678870496699),
    (0, 1, 0.0, 0.975),
    (1, 1, 0.025, 1.0),
    (7, 250, 0.0113300137956585, 0.0568372452730536),
    (120, 300, 0.34412903508639, 0.457866439565511),
    (299, 300, 0.981568747951932, 0.999915610867682),
    (33, 90, 0.267521571841554, 0.47485120744971),
];

pub fn oracle_terms(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Scores every candidate term from scratch against the whole corpus.
pub fn brute_force_keyword(corpus: &[String], instruction: &str) -> (String, f64) {
    let n = corpus.len() as f64;
    let words = oracle_terms(instruction);
    let mut best: Option<(String, f64)> = None;
    for term in &words {
        let tf = words.iter().filter(|w| *w == term).count() as f64;
        let df = corpus.iter().filter(|d| oracle_terms(d).contains(term)).count() as f64;
        let score = tf * (n / (1.0 + df)).ln();
        let better = match &best {
            None => true,
            Some((t, s)) => score > *s || (score == *s && term < t),
        };
        if better {
            best = Some((term.clone(), score));
        }
    }
    best.unwrap()
}

pub const TFIDF_WORDS: [&str; 22] = [
    "Write", "write", "a", "the", "poem", "Poem,", "about", "list", "three", "sort", "numbers.", "numbers", "find",
    "Find", "sum", "reverse", "words", "story", "cats", "dogs", "translate", "french",
];

pub const SALARY: &str = "Write a letter to your boss asking for an increase in salary";
pub const AVERAGE: &str = "Given two integers, find their average";

/// Ordinary instructions sharing most words with the two examples above.
pub const BACKGROUND: [&str; 24] = [
    "Write a short story about a dragon",
    "Write a poem about the ocean",
    "Write a letter of recommendation for a student",
    "Write an email to your team asking for feedback",
    "Write a thank you letter to your teacher",
    "Write a cover letter for a job application",
    "Write a letter to a friend asking about their vacation",
    "Explain how to ask your boss for a day off",
    "Describe what makes a good boss",
    "Suggest ways to increase productivity at work",
    "Explain why prices increase during inflation",
    "Find the largest of the given numbers",
    "Find the sum of two integers",
    "Given two strings, find their longest common prefix",
    "Given a list of integers, find the maximum",
    "Given a sentence, find all the nouns in it",
    "Given two words, find their rhymes",
    "Given two integers, return their product",
    "Sort the given integers in ascending order",
    "Find the median of the integers in the list",
    "Translate the sentence into French",
    "Classify the sentiment of the review",
    "Summarize the article in one sentence",
    "Give three tips for staying healthy",
];

pub fn random_ids(r: &mut impl rand::Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| r.random_range(2..vocab as u32)).collect()
}

pub fn gist_sequence(prompt: &[u32], k: usize, suffix: &[u32]) -> Vec<u32> {
    let mut ids = prompt.to_vec();
    ids.extend(std::iter::repeat_n(GIST, k));
    ids.extend_from_slice(suffix);
    ids
}

/// Largest absolute difference between post-gist logits of the full
/// gist-masked sequence and suffix logits computed against the gist prefix.
pub fn cache_gap(cfg: &ModelConfig, p: &Params, prompt: &[u32], k: usize, suffix: &[u32]) -> f64 {
    let ids = gist_sequence(prompt, k, suffix);
    let mask = decoder_mask(&[&ids], GIST, PAD, MaskMode::Gist);
    let full = forward(cfg, p, &TokenSequence::new(ids.clone(), GIST, PAD), Some(&mask), None).unwrap();
    let prefix = compress_prompt(cfg, p, prompt, k).unwrap();
    let cached = forward(cfg, p, &TokenSequence::new(suffix.to_vec(), GIST, PAD), None, Some(&prefix)).unwrap();
    let start = (prompt.len() + k) * cfg.vocab_size;
    let a = &full.logits.data()[start..];
    let b = cached.logits.data();
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
