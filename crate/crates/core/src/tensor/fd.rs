//! Central finite differences, used as the independent oracle for every
//! gradient in the crate.

use super::{backward, Array, Graph, Tensor};
use crate::error::Result;

/// Central-difference estimate of the gradient of `f` at `x`:
/// `(f(x + h e_k) - f(x - h e_k)) / 2h` for every coordinate `k`.
///
/// Panics if `h` is not strictly positive.
pub fn finite_difference_grad(mut f: impl FnMut(&Array) -> f64, x: &Array, h: f64) -> Array {
    assert!(h > 0.0, "finite-difference step must be positive, got {h}");
    let mut probe = x.clone();
    let mut grad = Array::zeros(x.shape());
    for k in 0..x.numel() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe);
        probe.data_mut()[k] = orig - h;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest coordinate error `|a - n| / max(1, |n|)` between an analytic and a
/// numeric gradient.
pub fn scaled_error(analytic: &Array, numeric: &Array) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares reverse-mode gradients of `build` against central differences
/// for every input, returning the largest [`scaled_error`] seen.
///
/// `build` receives one tensor per entry of `inputs` and must return a
/// scalar. It is called once with graph leaves and then repeatedly with
/// constants while probing.
pub fn gradcheck(
    build: impl Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Array],
    h: f64,
) -> Result<f64> {
    let graph = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|a| graph.leaf(a.clone())).collect();
    let loss = build(&leaves)?;
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let grads = backward(&loss, &refs, false)?;

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let mut failure = None;
        let numeric = finite_difference_grad(
            |probe| {
                let args: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, a)| Tensor::constant(if j == k { probe.clone() } else { a.clone() }))
                    .collect();
                match build(&args) {
                    Ok(t) => t.item(),
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            input,
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(scaled_error(grads[k].value(), &numeric));
    }
    Ok(worst)
}
