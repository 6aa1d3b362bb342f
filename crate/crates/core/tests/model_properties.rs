use gistkit::cache::{cache_instruction, compress_prompt};
use gistkit::masking::{decoder_mask, MaskMode, TokenSequence};
use gistkit::model::{forward, generate, trace, ModelConfig, Params, Prefix};
use gistkit::numeric::rng::rng;
use gistkit::numeric::{grad_check_many, Graph};
use rand::Rng as _;

mod common;
use common::{cache_gap, random_ids, GIST, PAD};

#[test]
fn gist_cache_reproduces_full_masked_logits() {
    let mut r = rng(11);
    for trial in 0..20 {
        let layers = 1 + trial % 3;
        let cfg = ModelConfig::tiny(layers, 8, 2);
        let p = Params::init_with_scale(&cfg, &mut rng(trial as u64), 0.5).unwrap();
        let (np, ns) = (r.random_range(1..8), r.random_range(1..8));
        let prompt = random_ids(&mut r, np, cfg.vocab_size);
        let suffix = random_ids(&mut r, ns, cfg.vocab_size);
        let k = r.random_range(1..4);
        let gap = cache_gap(&cfg, &p, &prompt, k, &suffix);
        assert!(gap < 1e-9, "trial {trial}: gap {gap}");
    }
}

#[test]
fn pre_gist_tokens_are_invisible_given_gist_kv() {
    let cfg = ModelConfig::tiny(2, 8, 2);
    let p = Params::init_with_scale(&cfg, &mut rng(5), 0.5).unwrap();
    let prefix = compress_prompt(&cfg, &p, &[4, 5, 6], 1).unwrap();
    let other = compress_prompt(&cfg, &p, &[9, 9, 2], 1).unwrap();
    assert_ne!(prefix.keys, other.keys);
    let suffix = TokenSequence::new(vec![7, 8], GIST, PAD);
    let a = forward(&cfg, &p, &suffix, None, Some(&prefix)).unwrap();
    // Same gist-position activations injected under a different source prompt.
    let mut swapped = other.clone();
    swapped.keys = prefix.keys.clone();
    swapped.values = prefix.values.clone();
    let b = forward(&cfg, &p, &suffix, None, Some(&swapped)).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn instruction_cache_matches_uncached_decoding() {
    let cfg = ModelConfig::tiny(2, 8, 2);
    let p = Params::init_with_scale(&cfg, &mut rng(8), 0.5).unwrap();
    let prompt = [3, 4, 5, 6, 7];
    let suffix = [8, 9];
    let cache = cache_instruction(&cfg, &p, &prompt).unwrap();
    let from_cache = generate(&cfg, &p, Prefix::Cached { cache: &cache, suffix: &suffix }, 8, None).unwrap();
    let all: Vec<u32> = prompt.iter().chain(&suffix).copied().collect();
    let plain = generate(&cfg, &p, Prefix::Tokens { ids: &all, mode: MaskMode::Causal }, 8, None).unwrap();
    assert_eq!(from_cache, plain);
}

#[test]
fn gist_cache_generation_matches_masked_generation() {
    let cfg = ModelConfig::tiny(2, 8, 2);
    let p = Params::init_with_scale(&cfg, &mut rng(12), 0.5).unwrap();
    let prompt = [3, 4, 5, 6];
    let suffix = [8, 9, 10];
    let cache = compress_prompt(&cfg, &p, &prompt, 2).unwrap();
    let a = generate(&cfg, &p, Prefix::Cached { cache: &cache, suffix: &suffix }, 10, None).unwrap();
    let mut all = prompt.to_vec();
    all.extend([GIST, GIST]);
    all.extend(suffix);
    let b = generate(&cfg, &p, Prefix::Tokens { ids: &all, mode: MaskMode::Gist }, 10, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn full_model_gradient_check() {
    let cfg = ModelConfig::tiny(2, 16, 2);
    let params = Params::init_with_scale(&cfg, &mut rng(3), 0.3).unwrap();
    let batch = vec![vec![4u32, 5, GIST, 6, 7, 8, 9, 10], vec![11u32, GIST, 12, 13, 14, 15, 16, PAD]];
    let mask = decoder_mask(&batch, GIST, PAD, MaskMode::Gist).into_vec();
    let targets: Vec<usize> = batch.iter().flat_map(|s| s[1..].iter().map(|&t| t as usize).chain([2])).collect();
    let keep: Vec<bool> = batch.iter().flat_map(|s| (0..s.len()).map(move |i| i + 1 < s.len() && s[i + 1] != PAD)).collect();
    let err = grad_check_many(
        |g: &mut Graph, ids| {
            let tr = trace(g, &cfg, ids, &batch, mask.clone(), None)?;
            g.cross_entropy(tr.logits, &targets, &keep)
        },
        params.tensors(),
        1e-5,
        None,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}
