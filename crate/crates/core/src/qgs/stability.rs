//! Leading eigenvalue of the field Jacobian at an equilibrium.
//!
//! The field is a gradient field, so its Jacobian is symmetric up to
//! finite-difference error. Small systems get a dense finite-difference
//! Jacobian; large ones a Lanczos estimate driven by finite-difference
//! Jacobian-vector products.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{field, ConstraintSystem, QgsSettings};

/// Dimension up to which the full Jacobian is formed.
pub const DENSE_STABILITY_LIMIT: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityTag {
    Stable,
    Unstable,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub tag: StabilityTag,
    /// Eigenvalue of the field Jacobian with the largest real part.
    pub leading_eigenvalue: Option<f64>,
}

impl Stability {
    pub fn undetermined() -> Self {
        Self {
            tag: StabilityTag::Undetermined,
            leading_eigenvalue: None,
        }
    }

    fn classify(lambda: f64, threshold: f64) -> Self {
        let tag = if lambda < -threshold {
            StabilityTag::Stable
        } else if lambda > threshold {
            StabilityTag::Unstable
        } else {
            StabilityTag::Undetermined
        };
        Self {
            tag,
            leading_eigenvalue: Some(lambda),
        }
    }
}

fn fd_step(x: &[f64]) -> f64 {
    let scale = x.iter().map(|v| v.abs()).fold(1.0, f64::max);
    1e-6 * scale
}

/// Central-difference Jacobian-vector product of the field.
fn field_jvp(sys: &ConstraintSystem, x: &[f64], v: &[f64], eps: f64) -> Option<Vec<f64>> {
    let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + eps * b).collect();
    let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - eps * b).collect();
    let fp = field(sys, &xp).ok()?;
    let fm = field(sys, &xm).ok()?;
    Some(
        fp.iter()
            .zip(&fm)
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect(),
    )
}

/// Dense finite-difference Jacobian of the field, symmetrized.
pub fn field_jacobian_fd(sys: &ConstraintSystem, x: &[f64]) -> Option<DMatrix<f64>> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        let eps = 1e-6 * x[j].abs().max(1.0);
        e[j] = 1.0;
        let col = field_jvp(sys, x, &e, eps)?;
        e[j] = 0.0;
        jac.column_mut(j).copy_from_slice(&col);
    }
    Some((&jac + jac.transpose()) * 0.5)
}

/// Returns the stability tag and, when available, the unit eigenvector of
/// the leading eigenvalue.
pub fn analyze(
    sys: &ConstraintSystem,
    x: &[f64],
    settings: &QgsSettings,
) -> (Stability, Option<Vec<f64>>) {
    if x.len() <= DENSE_STABILITY_LIMIT {
        dense(sys, x, settings)
    } else {
        lanczos(sys, x, settings)
    }
}

fn dense(
    sys: &ConstraintSystem,
    x: &[f64],
    settings: &QgsSettings,
) -> (Stability, Option<Vec<f64>>) {
    let Some(jac) = field_jacobian_fd(sys, x) else {
        return (Stability::undetermined(), None);
    };
    let eig = SymmetricEigen::new(jac);
    let (idx, lambda) =
        eig.eigenvalues
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
            );
    let vec: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
    (Stability::classify(lambda, settings.grad_tol), Some(vec))
}

fn lanczos(
    sys: &ConstraintSystem,
    x: &[f64],
    settings: &QgsSettings,
) -> (Stability, Option<Vec<f64>>) {
    let n = x.len();
    let steps = settings.stability_probe_steps.clamp(2, n);
    let eps = fd_step(x);
    // Deterministic start vector so the analysis is reproducible.
    let mut q: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i * 7919) % 13) as f64 * 0.1)
        .collect();
    let qn = norm(&q);
    q.iter_mut().for_each(|v| *v /= qn);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut beta: Vec<f64> = Vec::with_capacity(steps);
    basis.push(q);
    for k in 0..steps {
        let Some(mut w) = field_jvp(sys, x, &basis[k], eps) else {
            return (Stability::undetermined(), None);
        };
        let a = dot(&w, &basis[k]);
        alpha.push(a);
        // Full reorthogonalization against every stored vector.
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(wi, bi)| *wi -= c * bi);
            }
        }
        let bnorm = norm(&w);
        if k + 1 == steps || bnorm < 1e-12 {
            beta.push(bnorm);
            break;
        }
        beta.push(bnorm);
        w.iter_mut().for_each(|v| *v /= bnorm);
        basis.push(w);
    }

    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let (idx, theta) =
        eig.eigenvalues
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
            );
    let s = eig.eigenvectors.column(idx);
    let residual = (beta[m - 1] * s[m - 1]).abs();
    let mut ritz = vec![0.0; n];
    for (j, b) in basis.iter().take(m).enumerate() {
        ritz.iter_mut().zip(b).for_each(|(r, bi)| *r += s[j] * bi);
    }
    let rn = norm(&ritz);
    if rn > 0.0 {
        ritz.iter_mut().for_each(|v| *v /= rn);
    }
    let mut stab = Stability::classify(theta, settings.grad_tol);
    // An unconverged Ritz pair cannot certify stability.
    if residual > 1e-3 * (1.0 + theta.abs()) && stab.tag == StabilityTag::Stable {
        stab.tag = StabilityTag::Undetermined;
    }
    (stab, Some(ritz))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qgs::testing::{double_well, linear_shift};

    #[test]
    fn linear_system_is_stable() {
        let sys = ConstraintSystem::new(linear_shift(&[0.0, 0.0])).unwrap();
        let (s, v) = analyze(&sys, &[0.0, 0.0], &QgsSettings::default());
        assert_eq!(s.tag, StabilityTag::Stable);
        assert!((s.leading_eigenvalue.unwrap() + 1.0).abs() < 1e-6);
        assert_eq!(v.unwrap().len(), 2);
    }

    #[test]
    fn double_well_top_is_unstable() {
        let sys = ConstraintSystem::new(double_well()).unwrap();
        let (s, _) = analyze(&sys, &[0.0], &QgsSettings::default());
        assert_eq!(s.tag, StabilityTag::Unstable);
        // f = ¼(x²−1)², f'' (0) = −1 so the field Jacobian is +1.
        assert!((s.leading_eigenvalue.unwrap() - 1.0).abs() < 1e-5);
        let (s, _) = analyze(&sys, &[1.0], &QgsSettings::default());
        assert_eq!(s.tag, StabilityTag::Stable);
        assert!((s.leading_eigenvalue.unwrap() + 2.0).abs() < 1e-5);
    }

    #[test]
    fn lanczos_agrees_with_dense_on_separable_quadratic() {
        // h_i = c_i (x_i − 1) so the field Jacobian is −diag(c_i²).
        let n = 120;
        let coef: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 / n as f64).collect();
        let c2 = coef.clone();
        let map = crate::qgs::FnMap::new(
            n,
            n,
            move |x, h| {
                for i in 0..x.len() {
                    h[i] = coef[i] * (x[i] - 1.0);
                }
            },
            move |_, j| {
                for i in 0..c2.len() {
                    j[(i, i)] = c2[i];
                }
            },
        );
        let sys = ConstraintSystem::new(map.into_arc()).unwrap();
        let x = vec![1.0; n];
        let settings = QgsSettings {
            stability_probe_steps: 120,
            ..Default::default()
        };
        let (s, _) = analyze(&sys, &x, &settings);
        assert_eq!(s.tag, StabilityTag::Stable);
        assert!((s.leading_eigenvalue.unwrap() + 0.25).abs() < 1e-4);
    }
}
