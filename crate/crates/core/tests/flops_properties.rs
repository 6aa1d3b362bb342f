use gistkit::cache::{compare_storage, storage_report};
use gistkit::flops::{caching_comparison, forward_flops, presets, Accounting};
use gistkit::model::ModelConfig;
use proptest::prelude::*;

/// Chinchilla operation counts, written out per operation in u128.
fn oracle_total(cfg: &ModelConfig, seq: u128, kv: u128) -> u128 {
    let d = cfg.d_model as u128;
    let v = cfg.vocab_size as u128;
    let h = cfg.num_heads as u128;
    let ks = cfg.key_size as u128;
    let f = cfg.ffw_size as u128;
    let keys = seq + kv;
    let embed = 2 * seq * v * d;
    let q_proj = 2 * seq * d * (ks * h);
    let k_proj = q_proj;
    let v_proj = q_proj;
    let logits = 2 * seq * keys * (ks * h);
    let softmax = 3 * h * seq * keys;
    let reduce = 2 * seq * keys * (ks * h);
    let out = 2 * seq * (ks * h) * d;
    let up = 2 * seq * d * f;
    let down = 2 * seq * f * d;
    let layer = q_proj + k_proj + v_proj + logits + softmax + reduce + out + up + down;
    embed + cfg.num_layers as u128 * layer + 2 * seq * d * v
}

#[test]
fn totals_match_the_operation_oracle() {
    for cfg in [presets::llama7b(), presets::llama7b_gated(), ModelConfig::toy()] {
        for (s, kv) in [(1, 0), (1, 2000), (26, 0), (7, 19), (128, 1)] {
            let r = forward_flops(&cfg, s, kv);
            assert_eq!(r.total as u128, oracle_total(&cfg, s as u128, kv as u128));
        }
    }
}

#[test]
fn kv_dependent_share_on_llama7b() {
    let r = forward_flops(&presets::llama7b(), 1, 2000);
    let pct = 100.0 * r.kv_dependent_fraction;
    assert!((pct - 9.6).abs() <= 0.5, "{pct:.3}%");
    let ratio = r.total as f64 / forward_flops(&presets::llama7b(), 1, 0).total as f64;
    assert!((ratio - 1.10).abs() <= 0.02, "{ratio:.4}");
}

#[test]
fn gist_caching_savings_at_full_scale() {
    let c = caching_comparison(&presets::llama7b_gated(), 26, 1, 1, Accounting::SinglePass);
    let saved = c.gist_vs_none() as f64 / 1e9;
    assert!((saved - 362.0).abs() <= 36.2, "{saved:.1} GFLOPs");
    let rel = 100.0 * c.relative_vs_instruction();
    assert!((0.05..=0.30).contains(&rel), "{rel:.4}%");
    assert!(c.none > c.instruction && c.instruction > c.gist);
}

#[test]
fn llama_storage_per_token_and_ratio() {
    let cfg = presets::llama7b();
    assert_eq!(storage_report(&cfg, 1, 4, 0).bytes_per_token, 1_048_576);
    let s = compare_storage(&[26], 1).unwrap();
    assert_eq!(s.ratio_by_mean, 26.0);
    let budget = 26 * 1_048_576;
    assert_eq!(storage_report(&cfg, 1, 4, budget).num_cacheable_prompts_per_budget, 26);
    assert_eq!(storage_report(&cfg, 26, 4, budget).num_cacheable_prompts_per_budget, 1);
}

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..6, 1usize..5, 1usize..9, 1usize..64, 10usize..300).prop_map(|(layers, heads, ks, ffw, vocab)| {
        ModelConfig {
            vocab_size: vocab,
            d_model: heads * ks,
            num_layers: layers,
            num_heads: heads,
            key_size: ks,
            ffw_size: ffw,
            max_seq_len: 1024,
            gist_id: 1,
            pad_id: 0,
        }
    })
}

proptest! {
    #[test]
    fn total_is_the_sum_of_its_terms(cfg in small_config(), s in 1usize..50, kv in 0usize..50) {
        let r = forward_flops(&cfg, s, kv);
        let layer: u64 = r.per_layer.terms().iter().map(|&(_, v)| v).sum();
        prop_assert_eq!(r.total, r.embeddings + r.num_layers * layer + r.final_logits);
    }

    #[test]
    fn flops_strictly_increase(cfg in small_config(), s in 1usize..50, kv in 0usize..50) {
        let base = forward_flops(&cfg, s, kv).total;
        prop_assert!(forward_flops(&cfg, s + 1, kv).total > base);
        prop_assert!(forward_flops(&cfg, s, kv + 1).total > base);
        for bigger in [
            ModelConfig { num_layers: cfg.num_layers + 1, ..cfg },
            ModelConfig { vocab_size: cfg.vocab_size + 1, ..cfg },
            ModelConfig { ffw_size: cfg.ffw_size + 1, ..cfg },
            ModelConfig { num_heads: cfg.num_heads + 1, d_model: (cfg.num_heads + 1) * cfg.key_size, ..cfg },
            ModelConfig { key_size: cfg.key_size + 1, d_model: cfg.num_heads * (cfg.key_size + 1), ..cfg },
        ] {
            prop_assert!(forward_flops(&bigger, s, kv).total > base);
        }
    }

    #[test]
    fn exactly_three_terms_depend_on_the_cache(cfg in small_config(), s in 1usize..50, kv in 0usize..50, extra in 1usize..50) {
        let a = forward_flops(&cfg, s, kv).per_layer.terms();
        let b = forward_flops(&cfg, s, kv + extra).per_layer.terms();
        let changed: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect();
        prop_assert_eq!(changed, vec!["key_query_logits", "softmax", "softmax_query_reduction"]);
    }

    #[test]
    fn storage_scales_with_layers(cfg in small_config(), len in 1usize..40) {
        let one = storage_report(&cfg, len, 4, 0);
        let two = storage_report(&ModelConfig { num_layers: 2 * cfg.num_layers, ..cfg }, len, 4, 0);
        prop_assert_eq!(two.bytes_per_token, 2 * one.bytes_per_token);
        prop_assert_eq!(one.total_bytes, one.bytes_per_token * len as u64);
    }
}
