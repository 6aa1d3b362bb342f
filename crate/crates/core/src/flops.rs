//! Analytic forward-pass FLOPs with a KV cache, using the Chinchilla
//! counting rules with attention extended over `seq_len + kv_cache_len`
//! keys. All counts are exact integers.

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

/// Reference configurations at full scale.
pub mod presets {
    use crate::model::ModelConfig;

    /// LLaMA-7B geometry for the Chinchilla equations (two dense matrices
    /// of width 11008).
    pub fn llama7b() -> ModelConfig {
        ModelConfig {
            vocab_size: 32000,
            d_model: 4096,
            num_layers: 32,
            num_heads: 32,
            key_size: 128,
            ffw_size: 11008,
            max_seq_len: 2048,
            gist_id: 32000 - 1,
            pad_id: 0,
        }
    }

    /// LLaMA-7B with its gated (three-matrix) feed-forward block expressed as
    /// the two-matrix equivalent width `3 / 2 × 11008 = 16512`. This matches
    /// the operations a profiler counts on the real architecture.
    pub fn llama7b_gated() -> ModelConfig {
        ModelConfig {
            ffw_size: 11008 * 3 / 2,
            ..llama7b()
        }
    }

    pub fn by_name(name: &str) -> Option<ModelConfig> {
        match name {
            "llama7b" => Some(llama7b()),
            "llama7b-gated" => Some(llama7b_gated()),
            "toy" => Some(ModelConfig::toy()),
            _ => None,
        }
    }

    pub const NAMES: &[&str] = &["llama7b", "llama7b-gated", "toy"];
}

/// FLOPs of one attention layer plus its dense block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub kqv_proj: u64,
    pub key_query_logits: u64,
    pub softmax: u64,
    pub softmax_query_reduction: u64,
    pub final_linear: u64,
    pub dense_block: u64,
}

impl LayerFlops {
    pub fn attention(&self) -> u64 {
        self.kqv_proj + self.key_query_logits + self.softmax + self.softmax_query_reduction + self.final_linear
    }

    pub fn total(&self) -> u64 {
        self.attention() + self.dense_block
    }

    /// The terms that scale with the number of attended keys.
    pub fn kv_dependent(&self) -> u64 {
        self.key_query_logits + self.softmax + self.softmax_query_reduction
    }

    /// `(name, flops)` in a fixed order.
    pub fn terms(&self) -> [(&'static str, u64); 6] {
        [
            ("kqv_proj", self.kqv_proj),
            ("key_query_logits", self.key_query_logits),
            ("softmax", self.softmax),
            ("softmax_query_reduction", self.softmax_query_reduction),
            ("final_linear", self.final_linear),
            ("dense_block", self.dense_block),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub seq_len: u64,
    pub kv_cache_len: u64,
    pub num_layers: u64,
    pub embeddings: u64,
    pub per_layer: LayerFlops,
    pub final_logits: u64,
    pub total: u64,
    /// Share of one layer's FLOPs that depends on the cache length.
    pub kv_dependent_fraction: f64,
}

impl FlopsReport {
    /// Aligned human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "forward pass: seq_len={} kv_cache_len={} layers={}\n",
            self.seq_len, self.kv_cache_len, self.num_layers
        );
        let mut line = |name: &str, v: u64| s.push_str(&format!("  {name:<28}{v:>22}\n"));
        line("embeddings", self.embeddings);
        for (name, v) in self.per_layer.terms() {
            line(&format!("layer.{name}"), v);
        }
        line("final_logits", self.final_logits);
        line("total", self.total);
        s.push_str(&format!(
            "  {:<28}{:>21.4}%\n",
            "kv_dependent_fraction",
            self.kv_dependent_fraction * 100.0
        ));
        s
    }

    /// `key=value` lines for scripts.
    pub fn to_kv_lines(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("seq_len={}\nkv_cache_len={}\nnum_layers={}\n", self.seq_len, self.kv_cache_len, self.num_layers));
        s.push_str(&format!("embeddings={}\n", self.embeddings));
        for (name, v) in self.per_layer.terms() {
            s.push_str(&format!("layer.{name}={v}\n"));
        }
        s.push_str(&format!("final_logits={}\ntotal={}\n", self.final_logits, self.total));
        s.push_str(&format!("kv_dependent_fraction={}\n", self.kv_dependent_fraction));
        s
    }

    /// Per-term percentage of one layer (the pie-chart breakdown).
    pub fn layer_breakdown(&self) -> Vec<(&'static str, f64)> {
        let total = self.per_layer.total() as f64;
        self.per_layer
            .terms()
            .iter()
            .map(|&(n, v)| (n, 100.0 * v as f64 / total))
            .collect()
    }
}

pub fn forward_flops(cfg: &ModelConfig, seq_len: usize, kv_cache_len: usize) -> FlopsReport {
    let s = seq_len as u64;
    let swp = (seq_len + kv_cache_len) as u64;
    let d = cfg.d_model as u64;
    let v = cfg.vocab_size as u64;
    let heads = cfg.num_heads as u64;
    let width = cfg.key_size as u64 * heads;
    let ffw = cfg.ffw_size as u64;
    let layers = cfg.num_layers as u64;

    let embeddings = 2 * s * v * d;
    let per_layer = LayerFlops {
        kqv_proj: 2 * 3 * s * d * width,
        key_query_logits: 2 * s * swp * width,
        softmax: 3 * heads * s * swp,
        softmax_query_reduction: 2 * s * swp * width,
        final_linear: 2 * s * width * d,
        dense_block: 2 * s * (d * ffw + d * ffw),
    };
    let final_logits = 2 * s * d * v;
    let total = embeddings + layers * per_layer.total() + final_logits;
    FlopsReport {
        seq_len: s,
        kv_cache_len: kv_cache_len as u64,
        num_layers: layers,
        embeddings,
        per_layer,
        final_logits,
        total,
        kv_dependent_fraction: per_layer.kv_dependent() as f64 / per_layer.total() as f64,
    }
}

/// How one request is costed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Accounting {
    /// One forward pass over the fresh tokens.
    SinglePass,
    /// The forward pass plus `output_len` single-token decode steps.
    Generation { output_len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CachingComparison {
    pub prompt_len: usize,
    pub k: usize,
    pub input_len: usize,
    pub accounting: Accounting,
    pub none: u64,
    pub instruction: u64,
    pub gist: u64,
}

impl CachingComparison {
    pub fn gist_vs_none(&self) -> i128 {
        self.none as i128 - self.gist as i128
    }

    pub fn gist_vs_instruction(&self) -> i128 {
        self.instruction as i128 - self.gist as i128
    }

    pub fn relative_vs_none(&self) -> f64 {
        self.gist_vs_none() as f64 / self.none as f64
    }

    pub fn relative_vs_instruction(&self) -> f64 {
        self.gist_vs_instruction() as f64 / self.instruction as f64
    }

    /// Caching-strategy table: totals in GFLOPs and gist deltas.
    pub fn to_text(&self) -> String {
        let g = |v: u64| v as f64 / 1e9;
        format!(
            "prompt_len={} k={} input_len={} accounting={:?}\n\
             {:<14}{:>14}{:>14}{:>14}\n\
             {:<14}{:>14.3}{:>14.3}{:>14.3}\n\
             gist vs none:        {:>12.3} GFLOPs ({:.2}%)\n\
             gist vs instruction: {:>12.3} GFLOPs ({:.4}%)\n",
            self.prompt_len,
            self.k,
            self.input_len,
            self.accounting,
            "strategy",
            "None",
            "Instruction",
            "Gist",
            "GFLOPs",
            g(self.none),
            g(self.instruction),
            g(self.gist),
            self.gist_vs_none() as f64 / 1e9,
            100.0 * self.relative_vs_none(),
            self.gist_vs_instruction() as f64 / 1e9,
            100.0 * self.relative_vs_instruction(),
        )
    }
}

/// Cost of serving one request whose prompt is either re-encoded (none),
/// cached in full (instruction) or cached as `k` gist positions.
pub fn caching_comparison(
    cfg: &ModelConfig,
    prompt_len: usize,
    k: usize,
    input_len: usize,
    accounting: Accounting,
) -> CachingComparison {
    let cost = |seq: usize, kv: usize| -> u64 {
        let mut total = forward_flops(cfg, seq, kv).total;
        if let Accounting::Generation { output_len } = accounting {
            for step in 0..output_len {
                total += forward_flops(cfg, 1, kv + seq + step).total;
            }
        }
        total
    };
    CachingComparison {
        prompt_len,
        k,
        input_len,
        accounting,
        none: cost(prompt_len + input_len, 0),
        instruction: cost(input_len, prompt_len),
        gist: cost(input_len, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn term_sum_identity() {
        let r = forward_flops(&presets::llama7b(), 7, 300);
        let p = r.per_layer;
        assert_eq!(r.total, r.embeddings + r.num_layers * (p.attention() + p.dense_block) + r.final_logits);
    }

    #[test]
    fn zero_cache_uses_seq_len() {
        let cfg = ModelConfig::toy();
        let r = forward_flops(&cfg, 1, 0);
        assert_eq!(r.per_layer.softmax, 3 * cfg.num_heads as u64);
        assert_eq!(r.per_layer.key_query_logits, 2 * 128);
    }

    #[test]
    fn llama_kv_fraction_and_ratio() {
        let cfg = presets::llama7b();
        let r = forward_flops(&cfg, 1, 2000);
        assert!((r.kv_dependent_fraction - 0.096).abs() < 0.005, "{}", r.kv_dependent_fraction);
        let ratio = r.total as f64 / forward_flops(&cfg, 1, 0).total as f64;
        assert!((ratio - 1.10).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn prompt_equal_to_k_gives_no_delta() {
        let c = caching_comparison(&presets::llama7b(), 3, 3, 5, Accounting::SinglePass);
        assert_eq!(c.gist_vs_instruction(), 0);
    }

    #[test]
    fn gated_preset_saves_about_two_n_per_prompt_token() {
        let c = caching_comparison(&presets::llama7b_gated(), 26, 1, 1, Accounting::SinglePass);
        let gflops = c.gist_vs_none() as f64 / 1e9;
        assert!((gflops - 362.0).abs() / 362.0 < 0.10, "{gflops}");
    }

    #[test]
    fn generation_accounting_costs_more() {
        let cfg = presets::llama7b();
        let a = caching_comparison(&cfg, 26, 1, 10, Accounting::SinglePass);
        let b = caching_comparison(&cfg, 26, 1, 10, Accounting::Generation { output_len: 5 });
        assert!(b.gist > a.gist && b.none > a.none);
    }

    #[test]
    fn breakdown_sums_to_hundred() {
        let r = forward_flops(&presets::llama7b(), 1, 2000);
        let s: f64 = r.layer_breakdown().iter().map(|(_, p)| p).sum();
        assert!((s - 100.0).abs() < 1e-9);
        assert!(r.to_kv_lines().contains("total="));
    }
}
