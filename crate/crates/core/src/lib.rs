//! Gisting at desk scale: compress an instruction prompt into the keys and
//! values of a few inserted gist tokens by restricting attention, then
//! cache and reuse those activations.
//!
//! Module map:
//! - [`numeric`]: `f64` tensors, reverse-mode graph, AdamW, seeded RNG
//! - [`masking`]: decoder/encoder/cross-attention gist masks
//! - [`model`]: toy pre-norm transformer, greedy decoding, checkpoints
//! - [`cache`]: none/instruction/gist caching, storage accounting, cache store
//! - [`flops`]: analytic FLOPs with a KV cache
//! - [`taskgen`]: synthetic instruction corpus, tokenizer, TF-IDF baseline
//! - [`training`]: batch layout per condition, training loop, k sweep
//! - [`evaluation`]: ROUGE-L, exact match, win rates, distillation gap
//! - [`pipeline`]: reproducible experiment manifest and reports

pub mod cache;
mod error;
pub mod evaluation;
pub mod flops;
pub mod masking;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod taskgen;
pub mod training;
pub mod util;

pub use error::{Error, Result};
