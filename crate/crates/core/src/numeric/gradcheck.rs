use crate::error::{Error, Result};
use crate::numeric::graph::{Graph, NodeId};
use crate::numeric::tensor::Tensor;

/// Compares reverse-mode gradients against central differences.
///
/// `f` receives a fresh graph holding `point` as a parameter and must return
/// a scalar node. Returns the largest `|g_ad - g_fd| / max(1, |g_fd|)` over
/// all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    grad_check_many(
        |g: &mut Graph, ids: &[NodeId]| f(g, ids[0]),
        std::slice::from_ref(point),
        eps,
        None,
    )
}

/// Multi-input variant of [`grad_check`]. With `stride = Some(s)` only every
/// `s`-th coordinate of each input is probed.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64, stride: Option<usize>) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = pts.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check"))
        }
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = points.to_vec();
    let step = stride.unwrap_or(1).max(1);
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for i in (0..points[pi].len()).step_by(step) {
            let orig = points[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = analytic.map_or(0.0, |t| t.data()[i]);
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
