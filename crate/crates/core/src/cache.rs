//! Prompt caching strategies, the gist prefix `G(t)`, storage accounting
//! and the on-disk cache store.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::{decoder_mask, MaskMode, TokenSequence};
use crate::model::{forward, ModelConfig, Params};
use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheStrategy {
    /// Nothing cached; the prompt is re-encoded every time.
    None,
    /// Keys/values of every prompt position.
    Instruction,
    /// Keys/values of the gist positions only.
    Gist,
}

impl CacheStrategy {
    fn to_byte(self) -> u8 {
        match self {
            CacheStrategy::None => 0,
            CacheStrategy::Instruction => 1,
            CacheStrategy::Gist => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(CacheStrategy::None),
            1 => Ok(CacheStrategy::Instruction),
            2 => Ok(CacheStrategy::Gist),
            _ => Err(blob_err(format!("unknown strategy byte {b}"))),
        }
    }
}

/// Per-layer cached keys and values, each `[num_heads, len, key_size]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub strategy: CacheStrategy,
    /// Number of gist positions (0 for other strategies).
    pub k: usize,
    /// Absolute position of the next token fed after this cache. For a gist
    /// prefix this is `prompt_len + k`, not the number of stored entries.
    pub next_position: usize,
    /// SHA-256 of the producing prompt's token ids.
    pub source_hash: [u8; 32],
}

impl KVCache {
    pub fn empty(cfg: &ModelConfig) -> Self {
        let t = Tensor::zeros(&[cfg.num_heads, 0, cfg.key_size]);
        Self {
            keys: vec![t.clone(); cfg.num_layers],
            values: vec![t; cfg.num_layers],
            strategy: CacheStrategy::None,
            k: 0,
            next_position: 0,
            source_hash: prompt_digest(&[]),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |t| t.shape()[1])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    /// Structural invariants of a stored prompt cache.
    pub fn validate(&self) -> Result<()> {
        let len = self.len();
        if self.keys.len() != self.values.len() {
            return Err(blob_err("key/value layer counts differ"));
        }
        if self
            .keys
            .iter()
            .chain(&self.values)
            .any(|t| t.shape().len() != 3 || t.shape()[1] != len)
        {
            return Err(blob_err("layers disagree on cached length"));
        }
        match self.strategy {
            CacheStrategy::None if len != 0 => Err(blob_err("strategy none with cached entries")),
            CacheStrategy::Gist if len != self.k => {
                Err(blob_err(format!("gist cache has {len} entries but k = {}", self.k)))
            }
            _ => Ok(()),
        }
    }

    /// Appends `seq` new positions (given as `[seq, heads * key_size]`
    /// per layer) and advances `next_position`.
    pub(crate) fn extended(
        &self,
        cfg: &ModelConfig,
        new_keys: &[&Tensor],
        new_values: &[&Tensor],
        seq: usize,
    ) -> Result<KVCache> {
        let cat = |old: &Tensor, new: &Tensor| -> Result<Tensor> {
            let (h, kd) = (cfg.num_heads, cfg.key_size);
            let p = old.shape()[1];
            let mut data = Vec::with_capacity(h * (p + seq) * kd);
            for head in 0..h {
                data.extend_from_slice(&old.data()[head * p * kd..(head + 1) * p * kd]);
                for t in 0..seq {
                    let off = t * h * kd + head * kd;
                    data.extend_from_slice(&new.data()[off..off + kd]);
                }
            }
            Tensor::new(vec![h, p + seq, kd], data)
        };
        let keys = self
            .keys
            .iter()
            .zip(new_keys)
            .map(|(o, n)| cat(o, n))
            .collect::<Result<_>>()?;
        let values = self
            .values
            .iter()
            .zip(new_values)
            .map(|(o, n)| cat(o, n))
            .collect::<Result<_>>()?;
        Ok(KVCache {
            keys,
            values,
            strategy: self.strategy,
            k: self.k,
            next_position: self.next_position + seq,
            source_hash: self.source_hash,
        })
    }

    /// Entries `range` of every layer.
    fn slice(&self, range: std::ops::Range<usize>) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let cut = |t: &Tensor| -> Result<Tensor> {
            let (h, p, kd) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let mut data = Vec::with_capacity(h * range.len() * kd);
            for head in 0..h {
                let base = head * p * kd;
                data.extend_from_slice(&t.data()[base + range.start * kd..base + range.end * kd]);
            }
            Tensor::new(vec![h, range.len(), kd], data)
        };
        let keys = self.keys.iter().map(cut).collect::<Result<_>>()?;
        let values = self.values.iter().map(cut).collect::<Result<_>>()?;
        Ok((keys, values))
    }
}

/// SHA-256 over the little-endian token ids: the prompt's cache identity.
pub fn prompt_digest(ids: &[u32]) -> [u8; 32] {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.to_le_bytes());
    }
    h.finalize().into()
}

/// Encodes `(prompt, gist × k)` under the gist mask and keeps only the
/// keys and values at the `k` gist positions.
pub fn compress_prompt(cfg: &ModelConfig, params: &Params, prompt: &[u32], k: usize) -> Result<KVCache> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be nonempty".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one gist token".into()));
    }
    let mut ids = prompt.to_vec();
    ids.extend(std::iter::repeat_n(cfg.gist_id, k));
    let mask = decoder_mask(&[&ids], cfg.gist_id, cfg.pad_id, MaskMode::Gist);
    let out = forward(cfg, params, &TokenSequence::new(ids, cfg.gist_id, cfg.pad_id), Some(&mask), None)?;
    let (keys, values) = out.new_cache.slice(prompt.len()..prompt.len() + k)?;
    Ok(KVCache {
        keys,
        values,
        strategy: CacheStrategy::Gist,
        k,
        next_position: prompt.len() + k,
        source_hash: prompt_digest(prompt),
    })
}

/// Full keys/values of the uncompressed prompt under the causal mask.
pub fn cache_instruction(cfg: &ModelConfig, params: &Params, prompt: &[u32]) -> Result<KVCache> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be nonempty".into()));
    }
    let out = forward(cfg, params, &TokenSequence::new(prompt.to_vec(), cfg.gist_id, cfg.pad_id), None, None)?;
    let mut cache = out.new_cache;
    cache.strategy = CacheStrategy::Instruction;
    cache.source_hash = prompt_digest(prompt);
    Ok(cache)
}

/// Storage cost of caching `cache_len` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub bytes_per_token: u64,
    pub total_bytes: u64,
    /// How many such caches fit in the budget passed to [`storage_report`].
    pub num_cacheable_prompts_per_budget: u64,
}

/// `bytes_per_value × 2 (keys+values) × layers × heads × head_dim` per token.
pub fn storage_report(cfg: &ModelConfig, cache_len: usize, bytes_per_value: usize, budget_bytes: u64) -> StorageReport {
    let bytes_per_token =
        bytes_per_value as u64 * 2 * cfg.num_layers as u64 * cfg.num_heads as u64 * cfg.key_size as u64;
    let total_bytes = bytes_per_token * cache_len as u64;
    StorageReport {
        bytes_per_token,
        total_bytes,
        num_cacheable_prompts_per_budget: budget_bytes.checked_div(total_bytes).unwrap_or(u64::MAX),
    }
}

/// Instruction-vs-gist storage under a shared budget, sized both by mean and
/// by max prompt length (the per-prompt sizing rule is a deployment choice).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageComparison {
    pub mean_prompt_len: f64,
    pub max_prompt_len: usize,
    pub k: usize,
    /// Instruction-cache bytes ÷ gist-cache bytes at the mean length.
    pub ratio_by_mean: f64,
    /// Same at the max length.
    pub ratio_by_max: f64,
}

pub fn compare_storage(prompt_lens: &[usize], k: usize) -> Result<StorageComparison> {
    if prompt_lens.is_empty() || k == 0 {
        return Err(Error::InvalidArgument("need prompt lengths and k >= 1".into()));
    }
    let mean = prompt_lens.iter().sum::<usize>() as f64 / prompt_lens.len() as f64;
    let max = *prompt_lens.iter().max().expect("nonempty");
    Ok(StorageComparison {
        mean_prompt_len: mean,
        max_prompt_len: max,
        k,
        ratio_by_mean: mean / k as f64,
        ratio_by_max: max as f64 / k as f64,
    })
}

// ---------------------------------------------------------------------------
// Blob format and store

pub const CACHE_MAGIC: &[u8; 8] = b"GISTKV01";
pub const CACHE_EXTENSION: &str = "gkv";

fn blob_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "cache",
        detail: detail.into(),
    }
}

/// Serializes a cache produced by `cfg`.
///
/// ```text
/// magic "GISTKV01" | config digest [32] | strategy u8 | k u64 |
/// source_hash [32] | len u64 | next_position u64 | layers u32 | heads u32 |
/// key_size u32 | per layer: keys f64×(heads·len·key_size), values (same)
/// ```
pub fn encode_cache(cfg: &ModelConfig, cache: &KVCache) -> Result<Vec<u8>> {
    cache.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&cfg.digest());
    buf.push(cache.strategy.to_byte());
    buf.extend_from_slice(&(cache.k as u64).to_le_bytes());
    buf.extend_from_slice(&cache.source_hash);
    buf.extend_from_slice(&(cache.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(cache.next_position as u64).to_le_bytes());
    buf.extend_from_slice(&(cfg.num_layers as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.num_heads as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.key_size as u32).to_le_bytes());
    for (k, v) in cache.keys.iter().zip(&cache.values) {
        for x in k.data().iter().chain(v.data()) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Header fields readable without the producing config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CacheHeader {
    pub config_digest: String,
    pub strategy: CacheStrategy,
    pub k: usize,
    pub source_hash: String,
    pub len: usize,
    pub next_position: usize,
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.0.len() {
            return Err(blob_err("truncated"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<(CacheHeader, [u8; 32], [u8; 32])> {
    if r.take(8)? != CACHE_MAGIC {
        return Err(blob_err("bad magic bytes"));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let strategy = CacheStrategy::from_byte(r.take(1)?[0])?;
    let k = r.u64()? as usize;
    let source: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let len = r.u64()? as usize;
    let next_position = r.u64()? as usize;
    Ok((
        CacheHeader {
            config_digest: hex::encode(digest),
            strategy,
            k,
            source_hash: hex::encode(source),
            len,
            next_position,
        },
        digest,
        source,
    ))
}

pub fn peek_cache_header(bytes: &[u8]) -> Result<CacheHeader> {
    Ok(read_header(&mut Reader(bytes))?.0)
}

/// Inverse of [`encode_cache`]; a blob from a different config is rejected.
pub fn decode_cache(cfg: &ModelConfig, bytes: &[u8]) -> Result<KVCache> {
    let mut r = Reader(bytes);
    let (h, digest, source_hash) = read_header(&mut r)?;
    if digest != cfg.digest() {
        return Err(Error::ConfigDigestMismatch);
    }
    let layers = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let kd = r.u32()? as usize;
    if (layers, heads, kd) != (cfg.num_layers, cfg.num_heads, cfg.key_size) {
        return Err(blob_err("geometry disagrees with config"));
    }
    let per = heads * h.len * kd;
    let read_tensor = |r: &mut Reader<'_>| -> Result<Tensor> {
        let raw = r.take(per * 8)?;
        let data = raw
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(vec![heads, h.len, kd], data)
    };
    let mut keys = Vec::with_capacity(layers);
    let mut values = Vec::with_capacity(layers);
    for _ in 0..layers {
        keys.push(read_tensor(&mut r)?);
        values.push(read_tensor(&mut r)?);
    }
    if !r.0.is_empty() {
        return Err(blob_err("trailing bytes"));
    }
    let cache = KVCache {
        keys,
        values,
        strategy: h.strategy,
        k: h.k,
        next_position: h.next_position,
        source_hash,
    };
    cache.validate()?;
    Ok(cache)
}

/// Lookup key of a stored cache: digest over the model (see
/// [`crate::model::model_digest`]), strategy, k and the prompt's token ids.
/// Retraining or retokenizing yields a different key.
pub fn cache_key(model: &[u8; 32], strategy: CacheStrategy, k: usize, prompt: &[u32]) -> String {
    let mut h = Sha256::new();
    h.update(model);
    h.update([strategy.to_byte()]);
    h.update((k as u64).to_le_bytes());
    h.update(prompt_digest(prompt));
    hex::encode(h.finalize())
}

/// Directory of cache blobs laid out as `<root>/<hex digest>.gkv`.
#[derive(Debug, Clone)]
pub struct CacheStore {
    root: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct CacheEntry {
    pub key: String,
    pub bytes: u64,
    pub header: CacheHeader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub entries: usize,
    pub total_bytes: u64,
}

impl CacheStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.{CACHE_EXTENSION}"))
    }

    /// Atomically stores `cache` and returns its key.
    pub fn put(&self, cfg: &ModelConfig, model: &[u8; 32], prompt: &[u32], cache: &KVCache) -> Result<String> {
        let key = cache_key(model, cache.strategy, cache.k, prompt);
        crate::util::write_atomic(&self.path(&key), &encode_cache(cfg, cache)?)?;
        Ok(key)
    }

    pub fn get(&self, cfg: &ModelConfig, key: &str) -> Result<Option<KVCache>> {
        let path = self.path(key);
        match std::fs::read(&path) {
            Ok(bytes) => decode_cache(cfg, &bytes).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn list(&self) -> Result<Vec<CacheEntry>> {
        let mut out = Vec::new();
        let dir = match std::fs::read_dir(&self.root) {
            Ok(d) => d,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(Error::io(&self.root, e)),
        };
        for entry in dir {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some(CACHE_EXTENSION) {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let key = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.push(CacheEntry {
                key,
                bytes: bytes.len() as u64,
                header: peek_cache_header(&bytes)?,
            });
        }
        out.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(out)
    }

    pub fn stats(&self) -> Result<StoreStats> {
        let entries = self.list()?;
        Ok(StoreStats {
            entries: entries.len(),
            total_bytes: entries.iter().map(|e| e.bytes).sum(),
        })
    }

    /// Removes every blob; returns how many were deleted.
    pub fn purge(&self) -> Result<usize> {
        let entries = self.list()?;
        for e in &entries {
            let p = self.path(&e.key);
            std::fs::remove_file(&p).map_err(|err| Error::io(&p, err))?;
        }
        Ok(entries.len())
    }
}
