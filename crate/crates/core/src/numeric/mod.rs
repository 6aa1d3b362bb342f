//! Dense `f64` tensors, a reverse-mode graph, gradient checking, AdamW and
//! seeded randomness.

mod gradcheck;
mod graph;
mod optim;
pub mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{AttentionSpec, Gradients, Graph, NodeId};
pub use optim::{warmup_cosine, AdamW};
pub use tensor::{matmul, softmax_masked, Tensor, MASK_NEG};

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, ignoring rows whose `keep` flag is false.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], keep: &[bool]) -> crate::Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = g.cross_entropy(l, targets, keep)?;
    Ok(g.value(out).item())
}
