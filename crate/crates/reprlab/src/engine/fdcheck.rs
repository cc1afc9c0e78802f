//! Central finite differences, the independent oracle for every gradient
//! in this crate. Nothing here touches the autodiff graph: a loss is just
//! a black-box function of a flat parameter vector.

use crate::engine::nn::NetworkParams;

/// Central difference gradient of `f` at `x0` with step `h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Worst relative error between two gradient vectors. Entries where both
/// magnitudes fall below `floor` are compared absolutely against `floor`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs());
            if denom < floor {
                (a - n).abs() / floor
            } else {
                (a - n).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}

/// Write a flat vector of values back into the trainable segments of a
/// parameter set (the inverse of [`NetworkParams::flatten_trainable`]).
pub fn unflatten_trainable(params: &NetworkParams, flat: &[f64]) -> NetworkParams {
    let mut out = params.clone();
    let mut i = 0usize;
    for seg in out.segments_mut().iter_mut().filter(|s| s.trainable) {
        let n = seg.tensor.numel();
        let mut t = seg.tensor.clone();
        t.data_mut().copy_from_slice(&flat[i..i + n]);
        seg.tensor = t;
        i += n;
    }
    assert_eq!(i, flat.len(), "flat vector length mismatch");
    out
}

/// Finite-difference check of a parameterised loss: `loss_of` evaluates
/// the loss at arbitrary parameter values, `analytic` is the gradient
/// under test (in layout order). Returns the worst relative error.
pub fn check_param_gradient(
    params: &NetworkParams,
    analytic: &NetworkParams,
    loss_of: impl Fn(&NetworkParams) -> f64,
    h: f64,
) -> f64 {
    let x0 = params.flatten_trainable();
    let numeric = central_diff(|x| loss_of(&unflatten_trainable(params, x)), &x0, h);
    let flat_analytic = analytic.flatten_trainable();
    max_rel_err(&flat_analytic, &numeric, 1e-6)
}
