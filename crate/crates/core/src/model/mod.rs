//! Pre-norm decoder-only transformer with learned absolute positions.
//!
//! Attention takes an arbitrary boolean mask and optional cached keys and
//! values, which is all gisting needs: the same forward pass realizes the
//! prompted model, the gist-masked model and decoding from a gist prefix.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{load_checkpoint, model_digest, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use params::{GistInit, Params};

use crate::cache::{CacheStrategy, KVCache};
use crate::error::{Error, Result};
use crate::masking::{decoder_mask, GistMask, MaskMode, TokenSequence};
use crate::numeric::{AttentionSpec, Graph, NodeId, Tensor};
use params::{final_base, layer_base, slot, POS_EMB, TOK_EMB};

/// Node handles of one traced forward pass.
#[derive(Debug)]
pub struct Trace {
    /// `[batch * seq, vocab]`
    pub logits: NodeId,
    /// Per-layer new keys / values, `[batch * seq, heads * key_size]`.
    pub keys: Vec<NodeId>,
    pub values: Vec<NodeId>,
    /// Per-layer attention nodes (for probing attention weights).
    pub attention: Vec<NodeId>,
}

/// Adds `params` to `graph` as differentiable leaves (or constants).
pub fn param_nodes(graph: &mut Graph, params: &Params, trainable: bool) -> Vec<NodeId> {
    params
        .tensors()
        .iter()
        .map(|t| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        })
        .collect()
}

/// Traces a batched forward pass.
///
/// `batch` holds equal-length sequences; `mask` is `[batch, seq, past + seq]`
/// where `past` is the cached length. Positions start at
/// `cache.next_position` (0 without a cache).
pub fn trace<S: AsRef<[u32]>>(
    graph: &mut Graph,
    cfg: &ModelConfig,
    p: &[NodeId],
    batch: &[S],
    mask: Vec<bool>,
    cache: Option<&KVCache>,
) -> Result<Trace> {
    let bsz = batch.len();
    let seq = batch.first().map_or(0, |s| s.as_ref().len());
    if bsz == 0 || seq == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.iter().any(|s| s.as_ref().len() != seq) {
        return Err(Error::shape("forward", "batch rows differ in length"));
    }
    let start = cache.map_or(0, |c| c.next_position);
    if start + seq > cfg.max_seq_len {
        return Err(Error::ContextOverflow {
            len: start + seq,
            max: cfg.max_seq_len,
        });
    }
    if let Some(c) = cache {
        if c.num_layers() != cfg.num_layers {
            return Err(Error::shape("forward", "cache layer count differs from config"));
        }
    }

    let mut ids = Vec::with_capacity(bsz * seq);
    let mut pos = Vec::with_capacity(bsz * seq);
    for s in batch {
        for (t, &id) in s.as_ref().iter().enumerate() {
            if id as usize >= cfg.vocab_size {
                return Err(Error::TargetOutOfRange {
                    id: id as usize,
                    vocab: cfg.vocab_size,
                });
            }
            ids.push(id as usize);
            pos.push(start + t);
        }
    }
    let tok = graph.gather(p[TOK_EMB], &ids)?;
    let pe = graph.gather(p[POS_EMB], &pos)?;
    let mut x = graph.add(tok, pe)?;

    let mut keys = Vec::with_capacity(cfg.num_layers);
    let mut values = Vec::with_capacity(cfg.num_layers);
    let mut attention = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let w = |s: usize| p[layer_base(l) + s];
        let h = graph.layer_norm(x, w(slot::LN1_G), w(slot::LN1_B))?;
        let q = graph.matmul(h, w(slot::WQ))?;
        let k = graph.matmul(h, w(slot::WK))?;
        let v = graph.matmul(h, w(slot::WV))?;
        let spec = AttentionSpec {
            batch: bsz,
            seq,
            heads: cfg.num_heads,
            head_dim: cfg.key_size,
            mask: mask.clone(),
            past: cache.map(|c| (c.keys[l].clone(), c.values[l].clone())),
        };
        let a = graph.attention(q, k, v, spec)?;
        let o = graph.matmul(a, w(slot::WO))?;
        let o = graph.add_bias(o, w(slot::BO))?;
        x = graph.add(x, o)?;
        let h2 = graph.layer_norm(x, w(slot::LN2_G), w(slot::LN2_B))?;
        let f = graph.matmul(h2, w(slot::W1))?;
        let f = graph.add_bias(f, w(slot::B1))?;
        let f = graph.gelu(f)?;
        let f = graph.matmul(f, w(slot::W2))?;
        x = graph.add(x, f)?;
        keys.push(k);
        values.push(v);
        attention.push(a);
    }
    let fb = final_base(cfg);
    let h = graph.layer_norm(x, p[fb], p[fb + 1])?;
    let logits = graph.matmul(h, p[fb + 2])?;
    Ok(Trace {
        logits,
        keys,
        values,
        attention,
    })
}

/// Result of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[1, seq, vocab]`
    pub logits: Tensor,
    /// Prior cache extended with this call's keys and values.
    pub new_cache: KVCache,
}

/// Runs one sequence through the model.
///
/// Without a mask, a causal + pad mask is used (every cached position is
/// visible). A supplied mask must have shape `[1, 1, seq, cache_len + seq]`.
pub fn forward(
    cfg: &ModelConfig,
    params: &Params,
    ids: &TokenSequence,
    mask: Option<&GistMask>,
    cache: Option<&KVCache>,
) -> Result<ForwardOutput> {
    let seq = ids.len();
    let past = cache.map_or(0, KVCache::len);
    let mask = match mask {
        Some(m) => {
            if m.shape() != [1, 1, seq, past + seq] {
                return Err(Error::shape(
                    "forward",
                    format!("mask shape {:?}, expected [1, 1, {seq}, {}]", m.shape(), past + seq),
                ));
            }
            m.as_slice().to_vec()
        }
        None => default_mask(&ids.ids, past, cfg.pad_id).into_vec(),
    };
    let mut g = Graph::new();
    let p = param_nodes(&mut g, params, false);
    let tr = trace(&mut g, cfg, &p, &[&ids.ids], mask, cache)?;
    let logits = g.value(tr.logits).clone().reshape(vec![1, seq, cfg.vocab_size])?;
    let base = match cache {
        Some(c) => c.clone(),
        None => KVCache::empty(cfg),
    };
    let new_keys: Vec<&Tensor> = tr.keys.iter().map(|&k| g.value(k)).collect();
    let new_values: Vec<&Tensor> = tr.values.iter().map(|&v| g.value(v)).collect();
    let mut new_cache = base.extended(cfg, &new_keys, &new_values, seq)?;
    if cache.is_none() {
        new_cache.strategy = CacheStrategy::Instruction;
    }
    Ok(ForwardOutput { logits, new_cache })
}

/// Causal + pad over `past` visible cached positions followed by `ids`.
pub fn default_mask(ids: &[u32], past: usize, pad_id: u32) -> GistMask {
    GistMask::from_fn(1, ids.len(), past + ids.len(), |_, r, c| {
        c < past || (c - past <= r && ids[c - past] != pad_id)
    })
}

/// What generation starts from.
#[derive(Debug, Clone, Copy)]
pub enum Prefix<'a> {
    /// Full token sequence, encoded under the given mask mode.
    Tokens { ids: &'a [u32], mode: MaskMode },
    /// A stored prefix cache followed by fresh tokens (e.g. the input).
    Cached { cache: &'a KVCache, suffix: &'a [u32] },
}

/// Greedy decoding: argmax (lowest id on ties) until `max_new` tokens or `eos`.
/// The pad and gist ids are never emitted.
pub fn generate(
    cfg: &ModelConfig,
    params: &Params,
    prefix: Prefix<'_>,
    max_new: usize,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Ok(Vec::new());
    }
    let seq = |ids: Vec<u32>| TokenSequence::new(ids, cfg.gist_id, cfg.pad_id);
    let (mut out, mut history, mode) = match prefix {
        Prefix::Tokens { ids, mode } => {
            let m = decoder_mask(&[ids], cfg.gist_id, cfg.pad_id, mode);
            let out = forward(cfg, params, &seq(ids.to_vec()), Some(&m), None)?;
            (out, ids.to_vec(), mode)
        }
        Prefix::Cached { cache, suffix } => {
            if suffix.is_empty() {
                return Err(Error::InvalidArgument(
                    "cached generation needs at least one fresh token".into(),
                ));
            }
            let out = forward(cfg, params, &seq(suffix.to_vec()), None, Some(cache))?;
            (out, Vec::new(), MaskMode::Causal)
        }
    };
    let mut generated = Vec::new();
    loop {
        let last = out.logits.num_rows() - 1;
        let next = argmax_excluding(out.logits.row(last), &[cfg.pad_id, cfg.gist_id]) as u32;
        generated.push(next);
        if generated.len() == max_new || Some(next) == eos {
            break;
        }
        let cache = out.new_cache;
        let mask = if mode == MaskMode::Gist {
            history.push(next);
            let full = decoder_mask(&[&history], cfg.gist_id, cfg.pad_id, MaskMode::Gist);
            full.select_rows(0, history.len() - 1..history.len())
        } else {
            default_mask(&[next], cache.len(), cfg.pad_id)
        };
        out = forward(cfg, params, &seq(vec![next]), Some(&mask), Some(&cache))?;
    }
    Ok(generated)
}

fn argmax_excluding(row: &[f64], skip: &[u32]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if !skip.contains(&(i as u32)) && best.is_none_or(|b| v > row[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(0)
}
