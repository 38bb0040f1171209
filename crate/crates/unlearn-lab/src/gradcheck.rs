//! Central finite-difference verification for [`crate::autodiff`].
//!
//! The numeric path re-evaluates a freshly built graph at perturbed inputs
//! and never touches the reverse pass, so it stays an independent oracle
//! for `backward`.

use crate::autodiff::{CompGraph, NodeId};
use crate::tensor::Tensor;

/// Step for central differences; with f64 values of order one this puts the
/// truncation and rounding errors both well below the 1e-4 gate.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute guard for near-zero gradients.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the graph with `inputs` bound as its first nodes
/// (ids `0..inputs.len()`), run forward and backward, and return the graph
/// together with its scalar root. Returns the maximum relative error over
/// every element of every input gradient.
pub fn max_rel_error(
    inputs: &[Tensor],
    build: impl Fn(&[Tensor]) -> (CompGraph, NodeId),
) -> f64 {
    let (base, _) = build(inputs);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = base.grad(NodeId(i)).data.clone();
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data[e] -= FD_STEP;
            let (gp, rp) = build(&plus);
            let (gm, rm) = build(&minus);
            let fd = (gp.scalar_value(rp) - gm.scalar_value(rm)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[e], fd));
        }
    }
    worst
}
