//! Central finite differences over f64 reference functions.
//!
//! The production tensors are f32; differencing an f32 forward pass at
//! eps = 1e-3 cannot resolve gradients to 1e-4. So numeric gradients are
//! always taken through an f64 re-implementation of the same map, and the
//! analytic f32 gradients are compared against those.

/// Central-difference gradient of `f` with respect to every element of `x`.
///
/// `f` must be a pure function of `x`.
pub fn grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + eps;
        let fp = f(&xs);
        xs[i] = orig - eps;
        let fm = f(&xs);
        xs[i] = orig;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Like [`grad`] but for a function of two input arrays, differentiating the
/// first one only.
pub fn grad_first(
    x: &[f64],
    other: &[f64],
    eps: f64,
    mut f: impl FnMut(&[f64], &[f64]) -> f64,
) -> Vec<f64> {
    grad(x, eps, |xs| f(xs, other))
}
