use gistkit::evaluation::{
    clopper_pearson, exact_match_rate, judge_all, lcs_len, normalize, read_judgments, rouge_l, rouge_l_beta,
    win_rate, win_rate_counts, write_judgments, Verdict,
};
use gistkit::taskgen::tfidf::TfIdf;
use gistkit::taskgen::Tokenizer;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

fn random_tokens(r: &mut ChaCha8Rng, max_len: usize, alphabet: u8) -> Vec<u8> {
    let n = r.random_range(0..=max_len);
    (0..n).map(|_| r.random_range(0..alphabet)).collect()
}

#[test]
fn rouge_l_matches_lcs_oracle_on_1000_pairs() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let cand = random_tokens(&mut r, 20, 5);
        let mut reference = random_tokens(&mut r, 20, 5);
        if reference.is_empty() {
            reference.push(0);
        }
        assert_eq!(lcs_len(&cand, &reference), lcs_table(&cand, &reference));
        let expect = rouge_l_oracle(&cand, &reference);
        let got = rouge_l(&cand, &reference).unwrap();
        assert!((got - expect).abs() < 1e-15, "{cand:?} vs {reference:?}: {got} != {expect}");
    }
}

#[test]
fn rouge_l_edge_cases() {
    assert!(rouge_l::<u8>(&[1], &[]).is_err());
    assert_eq!(rouge_l::<u8>(&[], &[1]).unwrap(), 0.0);
    assert_eq!(rouge_l(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    // beta large: recall dominates.
    let recall = rouge_l_beta(&[1, 2, 9, 9, 9, 9], &[1, 2], 1e6).unwrap();
    assert!((recall - 1.0).abs() < 1e-6);
}

proptest! {
    #[test]
    fn lcs_is_symmetric(a in prop::collection::vec(0u8..4, 0..24), b in prop::collection::vec(0u8..4, 0..24)) {
        prop_assert_eq!(lcs_len(&a, &b), lcs_len(&b, &a));
        prop_assert!(lcs_len(&a, &b) <= a.len().min(b.len()));
    }

    #[test]
    fn win_rate_ci_brackets_point_estimate(w in 0usize..60, l in 0usize..60, t in 0usize..60) {
        prop_assume!(w + l + t > 0);
        let rep = win_rate_counts(w, l, t).unwrap();
        prop_assert_eq!(rep.n(), w + l + t);
        prop_assert!(0.0 <= rep.ci_low && rep.ci_high <= 1.0);
        prop_assert!(rep.ci_low <= rep.win_rate_with_ties_split);
        prop_assert!(rep.win_rate_with_ties_split <= rep.ci_high);
    }
}

#[test]
fn clopper_pearson_matches_beta_quantiles() {
    for (x, n, lo, hi) in BETA_QUANTILES {
        let (a, b) = clopper_pearson(x, n, 0.05);
        assert!((a - lo).abs() < 1e-6, "({x}, {n}) low {a} vs {lo}");
        assert!((b - hi).abs() < 1e-6, "({x}, {n}) high {b} vs {hi}");
    }
    let (lo, hi) = clopper_pearson(0, 10, 0.05);
    assert_eq!(lo, 0.0);
    assert!((hi - 0.3085).abs() < 5e-5);
}

#[test]
fn win_rate_splits_ties() {
    let rep = win_rate_counts(3, 3, 4).unwrap();
    assert_eq!(rep.effective_wins(), 5);
    assert_eq!(rep.win_rate_with_ties_split, 0.5);
    assert!(win_rate_counts(0, 0, 0).is_err());
}

#[test]
fn normalization_is_affine_and_unclipped() {
    assert_eq!(normalize(0.2, 0.2, 0.6), Some(0.0));
    assert_eq!(normalize(0.6, 0.2, 0.6), Some(1.0));
    assert!((normalize(0.1, 0.2, 0.6).unwrap() + 0.25).abs() < 1e-12);
    assert_eq!(normalize(0.3, 0.5, 0.5), None);
}

#[test]
fn exact_match_counts_identical_strings() {
    assert_eq!(exact_match_rate(&["a b", "c"], &["a b", "d"]).unwrap(), 0.5);
    assert!(exact_match_rate::<&str>(&[], &[]).is_err());
}

#[test]
fn judgments_are_seeded_and_round_trip() {
    let ids: Vec<String> = (0..40).map(|i| format!("seen/{i}")).collect();
    let gold: Vec<String> = (0..40).map(|i| format!("w{i} x")).collect();
    let a: Vec<String> = gold.clone();
    let b: Vec<String> = (0..40).map(|i| if i % 3 == 0 { format!("w{i} x") } else { "y".into() }).collect();
    let j1 = judge_all(&ids, &gold, &a, &b, 5).unwrap();
    let j2 = judge_all(&ids, &gold, &a, &b, 5).unwrap();
    assert_eq!(j1, j2);
    assert!(j1.iter().any(|j| j.swapped) && j1.iter().any(|j| !j.swapped));
    for (i, j) in j1.iter().enumerate() {
        assert_eq!((j.a.as_str(), j.b.as_str()), (a[i].as_str(), b[i].as_str()));
        let expect = if i % 3 == 0 { Verdict::Tie } else { Verdict::A };
        assert_eq!(j.verdict, expect);
    }
    let rep = win_rate(&j1).unwrap();
    assert_eq!((rep.wins, rep.losses, rep.ties), (26, 0, 14));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("judgments.jsonl");
    write_judgments(&path, &j1).unwrap();
    assert_eq!(read_judgments(&path).unwrap(), j1);
}

#[test]
fn tfidf_keyword_matches_brute_force() {
    let vocab = TFIDF_WORDS;
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let corpus: Vec<String> = (0..100)
            .map(|_| {
                let n = r.random_range(1..8);
                (0..n).map(|_| vocab[r.random_range(0..vocab.len())]).collect::<Vec<_>>().join(" ")
            })
            .collect();
        let model = TfIdf::fit(corpus.iter().map(String::as_str));
        for doc in &corpus {
            let kw = model.keyword(doc).unwrap();
            let (term, score) = brute_force_keyword(&corpus, doc);
            assert_eq!(kw.term, term, "{doc}");
            assert!((kw.score - score).abs() < 1e-12);
            assert_eq!(oracle_terms(&kw.word), vec![term]);
        }
    }
}

#[test]
fn injected_instructions_pick_the_distinctive_word() {
    let corpus: Vec<&str> = BACKGROUND.iter().copied().chain([SALARY, AVERAGE]).collect();
    let model = TfIdf::fit(corpus.iter().copied());
    assert_eq!(model.keyword(SALARY).unwrap().word, "salary");
    assert_eq!(model.keyword(AVERAGE).unwrap().word, "average");
}

#[test]
fn tokenizer_round_trips_random_strings() {
    let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
    let tok = Tokenizer::from_texts(words.iter().map(String::as_str));
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let n = r.random_range(0..12);
        let text = (0..n).map(|_| words[r.random_range(0..words.len())].as_str()).collect::<Vec<_>>().join(" ");
        let ids = tok.encode(&text).unwrap();
        assert!(ids.iter().all(|&id| id >= 5));
        assert_eq!(tok.decode(&ids), text);
        let with_eos = tok.encode_output(&text).unwrap();
        assert_eq!(tok.decode(&with_eos), text);
    }
    assert!(tok.encode("unknown").is_err());
    assert!(tok.encode("<gist>").is_err());
    let json = serde_json::to_string(&tok).unwrap();
    assert_eq!(serde_json::from_str::<Tokenizer>(&json).unwrap(), tok);
}
