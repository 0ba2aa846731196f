//! Finite-difference oracles, kept independent of the analytic gradient code.

/// Central differences `(f(p + h eᵢ) - f(p - h eᵢ)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let up = f(&p);
            p[i] = orig - step;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Entrywise relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries whose true value is zero (or within rounding noise
/// of zero) from dividing by nothing.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / scale
}

/// Largest [`relative_error`] over two equal-length vectors.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}

/// Dense Jacobian of `f: Rⁿ → Rᵐ` by central differences, returned as `m` rows.
pub fn jacobian<F>(mut f: F, x: &[f64], step: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let m = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    let mut p = x.to_vec();
    for j in 0..x.len() {
        let orig = p[j];
        p[j] = orig + step;
        let up = f(&p);
        p[j] = orig - step;
        let down = f(&p);
        p[j] = orig;
        for i in 0..m {
            jac[i][j] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    jac
}

/// `log |det A|` via LU with partial pivoting.
pub fn log_abs_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j]);
    let lu = m.lu();
    let u = lu.u();
    (0..n).map(|i| u[(i, i)].abs().ln()).sum()
}
