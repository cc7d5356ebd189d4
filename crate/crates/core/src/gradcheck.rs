//! Central finite-difference gradient oracle.
//!
//! Checks analytic gradients against `(f(x+h) - f(x-h)) / 2h`. The oracle
//! only ever calls the forward pass, so it stays independent of the tape's
//! backward sweep.

/// Central differences of a scalar function w.r.t. every entry of every
/// parameter block.
pub fn central_diff<F>(f: &F, params: &[Vec<f64>], step: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<Vec<f64>> = params.to_vec();
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + step;
            let plus = f(&work);
            work[p][i] = orig - step;
            let minus = f(&work);
            work[p][i] = orig;
            g[i] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Largest per-entry relative error between two gradient vectors.
///
/// The denominator is floored at 1e-3 so that entries with (near-)zero true
/// gradient are compared absolutely instead of dividing by noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
