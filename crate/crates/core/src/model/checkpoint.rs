//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "GISTCKPT"
//! version    u32
//! config     9 × u64  vocab_size, d_model, num_layers, num_heads, key_size,
//!                     ffw_size, max_seq_len, gist_id, pad_id
//! count      u32      number of parameter records
//! record*    name_len u32, name bytes (UTF-8), rank u32, rank × u64 dims,
//!            prod(dims) × f64
//! ```

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::numeric::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GISTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        detail: detail.into(),
    }
}

pub fn write_checkpoint(cfg: &ModelConfig, params: &Params) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + params.num_scalars() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&cfg.to_le_bytes());
    buf.extend_from_slice(&(params.names().len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Params)> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut cfg_bytes = [0u8; ModelConfig::ENCODED_LEN];
    r.read_exact(&mut cfg_bytes).map_err(|_| bad("truncated config"))?;
    let cfg = ModelConfig::from_le_bytes(&cfg_bytes)?;
    let count = read_u32(&mut r)? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = read_u32(&mut r)? as usize;
        if n > r.len() {
            return Err(bad("truncated name"));
        }
        let name = std::str::from_utf8(&r[..n]).map_err(|_| bad("name is not UTF-8"))?;
        names.push(name.to_string());
        r = &r[n..];
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        if len.checked_mul(8).is_none_or(|b| b > r.len()) {
            return Err(bad(format!("truncated data for {name}")));
        }
        let data = r[..len * 8]
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        r = &r[len * 8..];
        tensors.push(Tensor::new(shape, data)?);
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let params = Params::from_parts(names, tensors);
    params.check(&cfg)?;
    Ok((cfg, params))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated integer"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated integer"))?;
    Ok(u64::from_le_bytes(b))
}

/// Identity of a trained model: SHA-256 of its checkpoint encoding.
pub fn model_digest(cfg: &ModelConfig, params: &Params) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(write_checkpoint(cfg, params)).into()
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &Params) -> Result<()> {
    crate::util::write_atomic(path, &write_checkpoint(cfg, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Params)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GistInit;
    use crate::numeric::rng::rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::tiny(2, 8, 2);
        let p = Params::init(&cfg, &mut rng(9), GistInit::Mean).unwrap();
        let bytes = write_checkpoint(&cfg, &p);
        assert_eq!(&bytes[..8], b"GISTCKPT");
        let (cfg2, p2) = read_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(p, p2);
        assert_eq!(write_checkpoint(&cfg2, &p2), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let cfg = ModelConfig::tiny(1, 8, 2);
        let p = Params::init(&cfg, &mut rng(9), GistInit::Mean).unwrap();
        let bytes = write_checkpoint(&cfg, &p);
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(&bad_magic).is_err());
    }
}
