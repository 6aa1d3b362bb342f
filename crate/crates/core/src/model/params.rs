use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numeric::rng::{normal_tensor, Rng};
use crate::numeric::Tensor;

pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;
const GLOBAL_HEAD: usize = 2;
pub(crate) const PER_LAYER: usize = 12;

/// Offsets of one block's tensors, relative to the block start.
pub(crate) mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 3;
    pub const WV: usize = 4;
    pub const WO: usize = 5;
    pub const BO: usize = 6;
    pub const LN2_G: usize = 7;
    pub const LN2_B: usize = 8;
    pub const W1: usize = 9;
    pub const B1: usize = 10;
    pub const W2: usize = 11;
}

pub(crate) fn layer_base(layer: usize) -> usize {
    GLOBAL_HEAD + layer * PER_LAYER
}

/// Index of the final norm gain; bias and unembedding follow.
pub(crate) fn final_base(cfg: &ModelConfig) -> usize {
    layer_base(cfg.num_layers)
}

/// How the gist embedding row is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GistInit {
    /// Mean of the other token rows plus small noise.
    Mean,
    /// Same random init as every other row.
    Random,
}

/// Named model parameters in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng, gist_init: GistInit) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let width = cfg.num_heads * cfg.key_size;
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.num_layers as f64).sqrt();
        let mut p = Params {
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let mut tok = normal_tensor(rng, &[cfg.vocab_size, d], std);
        if gist_init == GistInit::Mean {
            let g = cfg.gist_id as usize;
            let others = (cfg.vocab_size - 1) as f64;
            let noise = normal_tensor(rng, &[d], std * 0.1);
            let mut mean = vec![0.0; d];
            for r in (0..cfg.vocab_size).filter(|&r| r != g) {
                for (m, v) in mean.iter_mut().zip(tok.row(r)) {
                    *m += v / others;
                }
            }
            let data = tok.data_mut();
            for c in 0..d {
                data[g * d + c] = mean[c] + noise.data()[c];
            }
        }
        p.push("tok_emb", tok);
        p.push("pos_emb", normal_tensor(rng, &[cfg.max_seq_len, d], std));
        for l in 0..cfg.num_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            p.push(&n("ln1.gain"), Tensor::new(vec![d], vec![1.0; d])?);
            p.push(&n("ln1.bias"), Tensor::zeros(&[d]));
            p.push(&n("attn.wq"), normal_tensor(rng, &[d, width], std));
            p.push(&n("attn.wk"), normal_tensor(rng, &[d, width], std));
            p.push(&n("attn.wv"), normal_tensor(rng, &[d, width], std));
            p.push(&n("attn.wo"), normal_tensor(rng, &[width, d], resid_std));
            p.push(&n("attn.bo"), Tensor::zeros(&[d]));
            p.push(&n("ln2.gain"), Tensor::new(vec![d], vec![1.0; d])?);
            p.push(&n("ln2.bias"), Tensor::zeros(&[d]));
            p.push(&n("ffw.w1"), normal_tensor(rng, &[d, cfg.ffw_size], std));
            p.push(&n("ffw.b1"), Tensor::zeros(&[cfg.ffw_size]));
            p.push(&n("ffw.w2"), normal_tensor(rng, &[cfg.ffw_size, d], resid_std));
        }
        p.push("final_ln.gain", Tensor::new(vec![d], vec![1.0; d])?);
        p.push("final_ln.bias", Tensor::zeros(&[d]));
        p.push("unembed", normal_tensor(rng, &[d, cfg.vocab_size], std));
        Ok(p)
    }

    /// Like [`Params::init`] but with O(1) magnitudes everywhere, so that
    /// tests exercise non-trivial attention patterns.
    pub fn init_with_scale(cfg: &ModelConfig, rng: &mut Rng, scale: f64) -> Result<Self> {
        let mut p = Self::init(cfg, rng, GistInit::Random)?;
        for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
            if name.contains("gain") {
                continue;
            }
            let noise = normal_tensor(rng, t.shape(), scale);
            *t = noise;
        }
        Ok(p)
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        Self { names, tensors }
    }

    fn push(&mut self, name: &str, t: Tensor) {
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks tensor count and shapes against `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = layer_base(cfg.num_layers) + 3;
        if self.tensors.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} parameter tensors, found {}",
                self.tensors.len()
            )));
        }
        let tok = self.tensors[TOK_EMB].shape();
        let pos = self.tensors[POS_EMB].shape();
        if tok != [cfg.vocab_size, cfg.d_model] || pos != [cfg.max_seq_len, cfg.d_model] {
            return Err(Error::Config("embedding shapes do not match config".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::rng;

    #[test]
    fn gist_row_starts_near_mean() {
        let cfg = ModelConfig::tiny(1, 8, 2);
        let p = Params::init(&cfg, &mut rng(3), GistInit::Mean).unwrap();
        let tok = p.get("tok_emb").unwrap();
        let g = tok.row(cfg.gist_id as usize);
        assert!(g.iter().all(|v| v.abs() < 0.02));
        p.check(&cfg).unwrap();
        assert_eq!(p.names().last().unwrap(), "unembed");
    }
}
