use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::QgsError;

/// A smooth vector-valued map `x ↦ h(x)` together with its Jacobian.
///
/// Implementations must be pure: evaluation may happen from several threads
/// at once.
pub trait ResidualMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Writes `h(x)` into `out` (length `output_dim`).
    fn eval(&self, x: &[f64], out: &mut [f64]);

    /// Writes the `output_dim × input_dim` Jacobian into `jac`.
    fn jacobian(&self, x: &[f64], jac: &mut DMatrix<f64>);

    /// Writes `D h(x)ᵀ w` into `grad`.
    ///
    /// The default materializes the full Jacobian; large maps should override.
    fn vjp(&self, x: &[f64], w: &[f64], grad: &mut [f64]) {
        let mut jac = DMatrix::zeros(self.output_dim(), self.input_dim());
        self.jacobian(x, &mut jac);
        for (j, g) in grad.iter_mut().enumerate() {
            *g = jac.column(j).iter().zip(w).map(|(a, b)| a * b).sum();
        }
    }

    /// Evaluates `h(x)` and `D h(x)ᵀ h(x)` in one pass.
    fn residual_and_gradient(&self, x: &[f64], h: &mut [f64], grad: &mut [f64]) {
        self.eval(x, h);
        self.vjp(x, h, grad);
    }
}

type EvalFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type JacFn = dyn Fn(&[f64], &mut DMatrix<f64>) + Send + Sync;

/// Closure-backed [`ResidualMap`], convenient for small analytic problems.
pub struct FnMap {
    input_dim: usize,
    output_dim: usize,
    eval: Box<EvalFn>,
    jacobian: Box<JacFn>,
}

impl FnMap {
    pub fn new<E, J>(input_dim: usize, output_dim: usize, eval: E, jacobian: J) -> Self
    where
        E: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        J: Fn(&[f64], &mut DMatrix<f64>) + Send + Sync + 'static,
    {
        Self {
            input_dim,
            output_dim,
            eval: Box::new(eval),
            jacobian: Box::new(jacobian),
        }
    }

    pub fn into_arc(self) -> Arc<dyn ResidualMap> {
        Arc::new(self)
    }
}

impl ResidualMap for FnMap {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }
    fn jacobian(&self, x: &[f64], jac: &mut DMatrix<f64>) {
        (self.jacobian)(x, jac)
    }
}

/// Links an original inequality row to the slack variable that absorbs it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlackLink {
    pub inequality: usize,
    pub slack: usize,
}

/// Least-squares form of a constraint satisfaction problem.
///
/// The decision vector is `x = (y, s)` once slacks have been appended; the
/// residual `h(x)` vanishes exactly on feasible points.
#[derive(Clone)]
pub struct ConstraintSystem {
    map: Arc<dyn ResidualMap>,
    slack_map: Vec<SlackLink>,
}

impl fmt::Debug for ConstraintSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintSystem")
            .field("dim_x", &self.dim_x())
            .field("dim_h", &self.dim_h())
            .field("slack_map", &self.slack_map)
            .finish()
    }
}

impl ConstraintSystem {
    /// Wraps a residual map with no slack variables.
    pub fn new(map: Arc<dyn ResidualMap>) -> Result<Self, QgsError> {
        Self::with_slack_map(map, Vec::new())
    }

    pub fn with_slack_map(
        map: Arc<dyn ResidualMap>,
        slack_map: Vec<SlackLink>,
    ) -> Result<Self, QgsError> {
        if map.output_dim() == 0 {
            return Err(QgsError::EmptyProblem);
        }
        if map.input_dim() == 0 {
            return Err(QgsError::InvalidSystem("dim_x must be positive".into()));
        }
        let mut seen = vec![false; map.input_dim()];
        for link in &slack_map {
            if link.slack >= map.input_dim() || seen[link.slack] {
                return Err(QgsError::InvalidSystem(format!(
                    "slack index {} is out of range or repeated",
                    link.slack
                )));
            }
            seen[link.slack] = true;
        }
        Ok(Self { map, slack_map })
    }

    pub fn dim_x(&self) -> usize {
        self.map.input_dim()
    }

    pub fn dim_h(&self) -> usize {
        self.map.output_dim()
    }

    pub fn slack_map(&self) -> &[SlackLink] {
        &self.slack_map
    }

    pub fn map(&self) -> &Arc<dyn ResidualMap> {
        &self.map
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), QgsError> {
        if x.len() != self.dim_x() {
            return Err(QgsError::DimensionMismatch {
                expected: self.dim_x(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `h(x)`, rejecting non-finite components.
    pub fn residual(&self, x: &[f64]) -> Result<Vec<f64>, QgsError> {
        self.check_dim(x)?;
        let mut h = vec![0.0; self.dim_h()];
        self.map.eval(x, &mut h);
        check_finite(&h)?;
        Ok(h)
    }

    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, QgsError> {
        self.check_dim(x)?;
        let mut jac = DMatrix::zeros(self.dim_h(), self.dim_x());
        self.map.jacobian(x, &mut jac);
        Ok(jac)
    }

    /// Writes `∇f(x) = D h(x)ᵀ h(x)` into `grad` and returns `f(x)`.
    pub fn cost_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, QgsError> {
        self.check_dim(x)?;
        let mut h = vec![0.0; self.dim_h()];
        self.map.residual_and_gradient(x, &mut h, grad);
        check_finite(&h)?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(QgsError::NonFiniteGradient { index: i });
        }
        Ok(half_norm_sq(&h))
    }
}

pub(crate) fn half_norm_sq(h: &[f64]) -> f64 {
    0.5 * h.iter().map(|v| v * v).sum::<f64>()
}

fn check_finite(h: &[f64]) -> Result<(), QgsError> {
    match h.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(QgsError::NonFiniteResidual { index }),
        None => Ok(()),
    }
}

/// `f(x) = ½‖h(x)‖²`.
pub fn cost(sys: &ConstraintSystem, x: &[f64]) -> Result<f64, QgsError> {
    Ok(half_norm_sq(&sys.residual(x)?))
}

/// The quotient gradient vector field `F(x) = −D h(x)ᵀ h(x)`.
pub fn field(sys: &ConstraintSystem, x: &[f64]) -> Result<Vec<f64>, QgsError> {
    let mut g = vec![0.0; sys.dim_x()];
    sys.cost_and_gradient(x, &mut g)?;
    g.iter_mut().for_each(|v| *v = -*v);
    Ok(g)
}

/// Residual of `[C_I(y) + ŝ²; C_E(y)]` over the augmented vector `(y, s)`.
struct SlackAugmented {
    dim_y: usize,
    inequalities: Option<Arc<dyn ResidualMap>>,
    equalities: Option<Arc<dyn ResidualMap>>,
}

impl SlackAugmented {
    fn n_ineq(&self) -> usize {
        self.inequalities.as_ref().map_or(0, |m| m.output_dim())
    }
    fn n_eq(&self) -> usize {
        self.equalities.as_ref().map_or(0, |m| m.output_dim())
    }
}

impl ResidualMap for SlackAugmented {
    fn input_dim(&self) -> usize {
        self.dim_y + self.n_ineq()
    }

    fn output_dim(&self) -> usize {
        self.n_ineq() + self.n_eq()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let (y, s) = x.split_at(self.dim_y);
        let (hi, he) = out.split_at_mut(self.n_ineq());
        if let Some(ineq) = &self.inequalities {
            ineq.eval(y, hi);
            for (h, si) in hi.iter_mut().zip(s) {
                *h += si * si;
            }
        }
        if let Some(eq) = &self.equalities {
            eq.eval(y, he);
        }
    }

    fn jacobian(&self, x: &[f64], jac: &mut DMatrix<f64>) {
        let (y, s) = x.split_at(self.dim_y);
        let l = self.n_ineq();
        jac.fill(0.0);
        if let Some(ineq) = &self.inequalities {
            let mut ji = DMatrix::zeros(l, self.dim_y);
            ineq.jacobian(y, &mut ji);
            jac.view_mut((0, 0), (l, self.dim_y)).copy_from(&ji);
            for (i, si) in s.iter().enumerate() {
                jac[(i, self.dim_y + i)] = 2.0 * si;
            }
        }
        if let Some(eq) = &self.equalities {
            let e = eq.output_dim();
            let mut je = DMatrix::zeros(e, self.dim_y);
            eq.jacobian(y, &mut je);
            jac.view_mut((l, 0), (e, self.dim_y)).copy_from(&je);
        }
    }

    fn vjp(&self, x: &[f64], w: &[f64], grad: &mut [f64]) {
        let (y, s) = x.split_at(self.dim_y);
        let (wi, we) = w.split_at(self.n_ineq());
        let (gy, gs) = grad.split_at_mut(self.dim_y);
        gy.fill(0.0);
        if let Some(eq) = &self.equalities {
            eq.vjp(y, we, gy);
        }
        if let Some(ineq) = &self.inequalities {
            let mut tmp = vec![0.0; self.dim_y];
            ineq.vjp(y, wi, &mut tmp);
            gy.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            for ((g, si), wv) in gs.iter_mut().zip(s).zip(wi) {
                *g = 2.0 * si * wv;
            }
        }
    }

    fn residual_and_gradient(&self, x: &[f64], h: &mut [f64], grad: &mut [f64]) {
        let (y, s) = x.split_at(self.dim_y);
        let l = self.n_ineq();
        let (hi, he) = h.split_at_mut(l);
        let (gy, gs) = grad.split_at_mut(self.dim_y);
        gy.fill(0.0);
        if let Some(eq) = &self.equalities {
            eq.residual_and_gradient(y, he, gy);
        }
        if let Some(ineq) = &self.inequalities {
            ineq.eval(y, hi);
            for (hv, si) in hi.iter_mut().zip(s) {
                *hv += si * si;
            }
            let mut tmp = vec![0.0; self.dim_y];
            ineq.vjp(y, hi, &mut tmp);
            gy.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            for ((g, si), hv) in gs.iter_mut().zip(s).zip(hi.iter()) {
                *g = 2.0 * si * hv;
            }
        }
    }
}

/// Converts `C_I(y) < 0, C_E(y) = 0` into a least-squares system over
/// `x = (y, s)` by appending one slack per inequality row.
///
/// Either side may be absent; both absent (or both empty) is rejected.
pub fn add_slack(
    inequalities: Option<Arc<dyn ResidualMap>>,
    equalities: Option<Arc<dyn ResidualMap>>,
) -> Result<ConstraintSystem, QgsError> {
    let inequalities = inequalities.filter(|m| m.output_dim() > 0);
    let equalities = equalities.filter(|m| m.output_dim() > 0);
    let dim_y = match (&inequalities, &equalities) {
        (None, None) => return Err(QgsError::EmptyProblem),
        (Some(i), Some(e)) if i.input_dim() != e.input_dim() => {
            return Err(QgsError::InvalidSystem(format!(
                "inequality map takes {} inputs but equality map takes {}",
                i.input_dim(),
                e.input_dim()
            )))
        }
        (Some(i), _) => i.input_dim(),
        (None, Some(e)) => e.input_dim(),
    };
    if inequalities.is_none() {
        // No slacks: the system is the equality map itself.
        return ConstraintSystem::new(equalities.expect("checked above"));
    }
    let aug = SlackAugmented {
        dim_y,
        inequalities,
        equalities,
    };
    let slack_map = (0..aug.n_ineq())
        .map(|i| SlackLink {
            inequality: i,
            slack: dim_y + i,
        })
        .collect();
    ConstraintSystem::with_slack_map(Arc::new(aug), slack_map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qgs::testing::{fd_jacobian, linear_shift};

    fn ineq_pair() -> Arc<dyn ResidualMap> {
        // (−y < 0, y − 2 < 0)
        FnMap::new(
            1,
            2,
            |y, h| {
                h[0] = -y[0];
                h[1] = y[0] - 2.0;
            },
            |_, j| {
                j[(0, 0)] = -1.0;
                j[(1, 0)] = 1.0;
            },
        )
        .into_arc()
    }

    fn eq_shift() -> Arc<dyn ResidualMap> {
        FnMap::new(1, 1, |y, h| h[0] = y[0] - 1.0, |_, j| j[(0, 0)] = 1.0).into_arc()
    }

    #[test]
    fn single_inequality_feasible_point() {
        let ci = FnMap::new(1, 1, |y, h| h[0] = y[0] - 1.0, |_, j| j[(0, 0)] = 1.0).into_arc();
        let sys = add_slack(Some(ci), None).unwrap();
        assert_eq!(sys.dim_x(), 2);
        assert_eq!(sys.residual(&[0.0, 1.0]).unwrap(), vec![0.0]);
        assert_eq!(
            sys.slack_map(),
            &[SlackLink {
                inequality: 0,
                slack: 1
            }]
        );
    }

    #[test]
    fn equality_only_is_identity() {
        let ce = FnMap::new(1, 1, |y, h| h[0] = y[0], |_, j| j[(0, 0)] = 1.0).into_arc();
        let sys = add_slack(None, Some(ce)).unwrap();
        assert_eq!(sys.dim_x(), 1);
        assert_eq!(sys.dim_h(), 1);
        assert!(sys.slack_map().is_empty());
        assert_eq!(sys.residual(&[0.7]).unwrap(), vec![0.7]);
    }

    #[test]
    fn mixed_system_dimensions_and_feasibility() {
        let sys = add_slack(Some(ineq_pair()), Some(eq_shift())).unwrap();
        assert_eq!(sys.dim_x(), 3);
        assert_eq!(sys.dim_h(), 3);
        assert_eq!(sys.residual(&[1.0, 1.0, 1.0]).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_problem_rejected() {
        assert!(matches!(add_slack(None, None), Err(QgsError::EmptyProblem)));
        let empty = FnMap::new(1, 0, |_, _| {}, |_, _| {}).into_arc();
        assert!(matches!(
            add_slack(Some(empty), None),
            Err(QgsError::EmptyProblem)
        ));
    }

    #[test]
    fn augmented_jacobian_and_vjp_match_finite_differences() {
        let sys = add_slack(Some(ineq_pair()), Some(eq_shift())).unwrap();
        let x = [0.3, -0.7, 1.9];
        let jac = sys.jacobian(&x).unwrap();
        let fd = fd_jacobian(&sys, &x);
        assert!((jac - &fd).abs().max() < 1e-7);

        let mut g = vec![0.0; 3];
        sys.cost_and_gradient(&x, &mut g).unwrap();
        let h = sys.residual(&x).unwrap();
        let expect = fd.transpose() * nalgebra::DVector::from_vec(h);
        for (a, b) in g.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn slack_correctness_on_constructed_points() {
        let sys = add_slack(Some(ineq_pair()), Some(eq_shift())).unwrap();
        // y = 1 is feasible: C_I(1) = (−1, −1), so s_i = √(−c_i) = 1.
        let y = 1.0_f64;
        let s: Vec<f64> = [-y, y - 2.0].iter().map(|c: &f64| (-c).sqrt()).collect();
        assert_eq!(cost(&sys, &[y, s[0], s[1]]).unwrap(), 0.0);
    }

    #[test]
    fn cost_examples() {
        let id = ConstraintSystem::new(linear_shift(&[0.0])).unwrap();
        assert_eq!(cost(&id, &[0.0]).unwrap(), 0.0);
        let id2 = ConstraintSystem::new(linear_shift(&[0.0, 0.0])).unwrap();
        assert_eq!(cost(&id2, &[3.0, 4.0]).unwrap(), 12.5);
        let circle = ConstraintSystem::new(crate::qgs::testing::circle_line()).unwrap();
        assert_eq!(cost(&circle, &[1.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn non_finite_residual_names_index() {
        let bad = FnMap::new(
            1,
            2,
            |y, h| {
                h[0] = y[0];
                h[1] = f64::NAN;
            },
            |_, _| {},
        )
        .into_arc();
        let sys = ConstraintSystem::new(bad).unwrap();
        match cost(&sys, &[1.0]) {
            Err(QgsError::NonFiniteResidual { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn field_examples() {
        let sys = ConstraintSystem::new(linear_shift(&[1.0, -2.0])).unwrap();
        assert_eq!(field(&sys, &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(field(&sys, &[1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
        let sq = FnMap::new(
            1,
            1,
            |x, h| h[0] = x[0] * x[0],
            |x, j| j[(0, 0)] = 2.0 * x[0],
        );
        let sys = ConstraintSystem::new(sq.into_arc()).unwrap();
        assert_eq!(field(&sys, &[1.0]).unwrap(), vec![-2.0]);
    }
}
