//! Small analytic systems and finite-difference helpers shared by tests,
//! benchmarks and the acceptance suite.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::{ConstraintSystem, FnMap, ResidualMap};

/// `h(x) = x − c`, identity Jacobian.
pub fn linear_shift(c: &[f64]) -> Arc<dyn ResidualMap> {
    let c = c.to_vec();
    let n = c.len();
    FnMap::new(
        n,
        n,
        move |x, h| {
            for i in 0..x.len() {
                h[i] = x[i] - c[i];
            }
        },
        |_, j| j.fill_with_identity(),
    )
    .into_arc()
}

/// `h(x) = (x₁² + x₂² − 1, x₁ − x₂)`: unit circle meets the diagonal at
/// `±(√2/2, √2/2)`.
pub fn circle_line() -> Arc<dyn ResidualMap> {
    FnMap::new(
        2,
        2,
        |x, h| {
            h[0] = x[0] * x[0] + x[1] * x[1] - 1.0;
            h[1] = x[0] - x[1];
        },
        |x, j| {
            j[(0, 0)] = 2.0 * x[0];
            j[(0, 1)] = 2.0 * x[1];
            j[(1, 0)] = 1.0;
            j[(1, 1)] = -1.0;
        },
    )
    .into_arc()
}

/// `h(x) = (x², x − 1)`: no feasible point; the stationary point solves
/// `2x³ + x − 1 = 0`.
pub fn infeasible_pair() -> Arc<dyn ResidualMap> {
    FnMap::new(
        1,
        2,
        |x, h| {
            h[0] = x[0] * x[0];
            h[1] = x[0] - 1.0;
        },
        |x, j| {
            j[(0, 0)] = 2.0 * x[0];
            j[(1, 0)] = 1.0;
        },
    )
    .into_arc()
}

/// `h(x) = (x² − 1)/√2`, so `f(x) = ¼(x² − 1)²` with minima at `±1`.
pub fn double_well() -> Arc<dyn ResidualMap> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    FnMap::new(
        1,
        1,
        move |x, h| h[0] = (x[0] * x[0] - 1.0) * s,
        move |x, j| j[(0, 0)] = 2.0 * x[0] * s,
    )
    .into_arc()
}

/// Central finite-difference Jacobian of the residual.
pub fn fd_jacobian(sys: &ConstraintSystem, x: &[f64]) -> DMatrix<f64> {
    fd_jacobian_of(sys.map().as_ref(), x)
}

pub fn fd_jacobian_of(map: &dyn ResidualMap, x: &[f64]) -> DMatrix<f64> {
    let m = map.output_dim();
    let n = map.input_dim();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    let mut hp = vec![0.0; m];
    let mut hm = vec![0.0; m];
    for j in 0..n {
        let eps = 1e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + eps;
        map.eval(&xp, &mut hp);
        xp[j] = x[j] - eps;
        map.eval(&xp, &mut hm);
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (hp[i] - hm[i]) / (2.0 * eps);
        }
    }
    jac
}

/// Largest entrywise error of `a` against `b`, relative to
/// `max(|b|_max, 1e-3)`.
pub fn max_relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
    (a - b).abs().max() / scale
}
