//! Helpers shared by the integration suites: deterministic random tensors
//! and a central-difference gradient checker.

#![allow(dead_code)] // each test binary uses its own subset of these helpers

pub mod gradsweep;

use rand::Rng;
use redapt_core::autodiff::{NodeId, Tape};
use redapt_core::seeding::rng_from;
use redapt_core::tensor::Tensor;
use redapt_core::Result;

/// Maximum relative error accepted between analytic and central-difference
/// derivatives at fp64.
pub const GRAD_TOL: f64 = 1e-4;

/// Central-difference step. With values of order one, truncation error
/// scales as `h² ≈ 1e-10` and cancellation as `ε/h ≈ 1e-11`, both well
/// below [`GRAD_TOL`].
pub const FD_STEP: f64 = 1e-5;

/// Uniform random tensor in `[lo, hi)`, deterministic in `parts`.
pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, parts: &[u64]) -> Tensor {
    let mut rng = rng_from(parts);
    Tensor::from_fn(shape.to_vec(), |_| lo + (hi - lo) * rng.random::<f64>())
}

/// Collapse a tensor-valued graph output to a scalar through a fixed random
/// weighting. A plain sum would let a transposed or permuted output slip
/// through unnoticed; distinct per-element coefficients close that hole.
pub fn weighted_scalar(tape: &mut Tape, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = tape.value(out).shape().to_vec();
    let w = uniform_tensor(&shape, 0.25, 1.75, &[seed, 0xC0EF]);
    let wid = tape.constant(w);
    let prod = tape.mul(out, wid)?;
    Ok(tape.sum_all(prod))
}

/// Checks the analytic gradients of `f` against central finite differences,
/// element by element, for every input leaf.
///
/// `f` must rebuild the same graph from the given leaves on every call (any
/// randomness keyed off captured state, never drawn fresh) and return a
/// scalar loss node.
///
/// Panics with a labelled message on the first element whose relative error
/// reaches [`GRAD_TOL`], and also if every analytic gradient is exactly
/// zero — a graph like that would pass the comparison without testing
/// anything.
pub fn check_gradients<F>(label: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &ids).unwrap_or_else(|e| panic!("{label}: forward failed: {e}"));
    assert!(
        tape.value(loss).is_scalar(),
        "{label}: loss has shape {:?}, expected a scalar",
        tape.value(loss).shape()
    );
    tape.backward(loss)
        .unwrap_or_else(|e| panic!("{label}: backward failed: {e}"));
    let grads: Vec<Tensor> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| panic!("{label}: no gradient reached an input leaf"))
        })
        .collect();

    // Numeric pass: re-evaluate the loss with one element nudged at a time.
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&mut tape, &ids)
            .unwrap_or_else(|e| panic!("{label}: perturbed forward failed: {e}"));
        tape.value(loss).item()
    };
    for (i, grad) in grads.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let analytic = grad.data()[j];
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < GRAD_TOL,
                "{label}: input {i} element {j}: analytic {analytic:e} vs numeric {numeric:e} \
                 (rel err {rel:e})"
            );
        }
    }
    assert!(
        grads.iter().any(|g| g.data().iter().any(|&v| v != 0.0)),
        "{label}: all analytic gradients are zero — check the test wiring"
    );
}
