use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Transformer hyperparameters. All extents are positive integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub key_size: usize,
    pub ffw_size: usize,
    pub max_seq_len: usize,
    pub gist_id: u32,
    pub pad_id: u32,
}

impl ModelConfig {
    /// Default toy configuration used for the replication runs.
    pub fn toy() -> Self {
        Self {
            vocab_size: 512,
            d_model: 128,
            num_layers: 4,
            num_heads: 4,
            key_size: 32,
            ffw_size: 512,
            max_seq_len: 128,
            gist_id: 1,
            pad_id: 0,
        }
    }

    /// Small configuration for gradient checks and cache property tests.
    pub fn tiny(num_layers: usize, d_model: usize, num_heads: usize) -> Self {
        Self {
            vocab_size: 24,
            d_model,
            num_layers,
            num_heads,
            key_size: d_model / num_heads,
            ffw_size: 2 * d_model,
            max_seq_len: 32,
            gist_id: 1,
            pad_id: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.vocab_size,
            self.d_model,
            self.num_layers,
            self.num_heads,
            self.key_size,
            self.ffw_size,
            self.max_seq_len,
        ];
        if extents.contains(&0) {
            return Err(Error::Config("all extents must be positive".into()));
        }
        if self.d_model != self.num_heads * self.key_size {
            return Err(Error::Config(format!(
                "d_model {} != num_heads {} x key_size {}",
                self.d_model, self.num_heads, self.key_size
            )));
        }
        let v = self.vocab_size as u64;
        if u64::from(self.gist_id) >= v || u64::from(self.pad_id) >= v {
            return Err(Error::Config("gist_id and pad_id must be < vocab_size".into()));
        }
        if self.gist_id == self.pad_id {
            return Err(Error::Config("gist_id and pad_id must differ".into()));
        }
        Ok(())
    }

    /// Fixed-order little-endian encoding shared by checkpoints and digests.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let fields = [
            self.vocab_size as u64,
            self.d_model as u64,
            self.num_layers as u64,
            self.num_heads as u64,
            self.key_size as u64,
            self.ffw_size as u64,
            self.max_seq_len as u64,
            u64::from(self.gist_id),
            u64::from(self.pad_id),
        ];
        fields.iter().flat_map(|f| f.to_le_bytes()).collect()
    }

    pub(crate) const ENCODED_LEN: usize = 9 * 8;

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(Error::Format {
                kind: "config",
                detail: format!("expected {} bytes, got {}", Self::ENCODED_LEN, bytes.len()),
            });
        }
        let f: Vec<u64> = bytes
            .chunks(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let id = |v: u64| {
            u32::try_from(v).map_err(|_| Error::Format {
                kind: "config",
                detail: format!("token id {v} out of range"),
            })
        };
        let cfg = Self {
            vocab_size: f[0] as usize,
            d_model: f[1] as usize,
            num_layers: f[2] as usize,
            num_heads: f[3] as usize,
            key_size: f[4] as usize,
            ffw_size: f[5] as usize,
            max_seq_len: f[6] as usize,
            gist_id: id(f[7])?,
            pad_id: id(f[8])?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_le_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_valid() {
        ModelConfig::toy().validate().unwrap();
        assert_eq!(ModelConfig::toy().d_model, 128);
    }

    #[test]
    fn rejects_inconsistent_heads() {
        let mut c = ModelConfig::toy();
        c.key_size = 16;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.pad_id = c.gist_id;
        assert!(c.validate().is_err());
    }

    #[test]
    fn byte_encoding_round_trips() {
        let c = ModelConfig::tiny(2, 16, 2);
        assert_eq!(ModelConfig::from_le_bytes(&c.to_le_bytes()).unwrap(), c);
    }
}
