use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::integrate::{dopri5, Control, EndReason, StepFailure, StepperOptions};
use super::stability::{analyze, Stability};
use super::{ConstraintSystem, QgsError, QgsSettings};

pub const MINIMA_SCHEMA_VERSION: u32 = 1;

/// A point where the quotient gradient field (numerically) vanishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub point: Vec<f64>,
    pub cost: f64,
    pub grad_norm: f64,
    pub stability: Stability,
    /// Unit eigenvector of the leading field-Jacobian eigenvalue.
    #[serde(skip)]
    pub leading_direction: Option<Vec<f64>>,
}

/// Distinct equilibria found by [`enumerate_minima`], sorted by cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaSet {
    pub schema_version: u32,
    pub settings: QgsSettings,
    pub items: Vec<Equilibrium>,
    pub attempts_used: usize,
}

impl MinimaSet {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("minima set serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn stepper_options(settings: &QgsSettings, t_end: f64) -> StepperOptions {
    StepperOptions {
        abs_tol: settings.abs_tol,
        rel_tol: settings.rel_tol,
        t_end,
        max_steps: settings.max_steps,
        blowup_norm: settings.blowup_norm,
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Integrates `ẋ = −∇f(x)` from `x0` until `‖∇f‖₂ < grad_tol`.
///
/// `on_step` sees `(t, x, cost)` at every accepted step.
pub fn integrate_forward_observed(
    sys: &ConstraintSystem,
    x0: &[f64],
    settings: &QgsSettings,
    mut on_step: impl FnMut(f64, &[f64], f64),
) -> Result<Equilibrium, QgsError> {
    if x0.len() != sys.dim_x() {
        return Err(QgsError::DimensionMismatch {
            expected: sys.dim_x(),
            got: x0.len(),
        });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(QgsError::NumericalBlowup);
    }
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let rhs = |x: &[f64], dx: &mut [f64]| -> Result<f64, QgsError> {
        let c = sys.cost_and_gradient(x, dx)?;
        dx.iter_mut().for_each(|v| *v = -*v);
        Ok(c)
    };
    let observer = |t: f64, x: &[f64], dx: &[f64], c: f64| {
        on_step(t, x, c);
        let g = norm(dx);
        if best.as_ref().is_none_or(|b| c < b.0) {
            best = Some((c, x.to_vec(), g));
        }
        if g < settings.grad_tol {
            Control::Stop
        } else {
            Control::Continue
        }
    };
    let outcome = dopri5(
        rhs,
        x0,
        stepper_options(settings, settings.max_time),
        observer,
    );
    let unconverged = |best: Option<(f64, Vec<f64>, f64)>| {
        let (cost, point, grad_norm) = best.expect("observer runs at t = 0");
        QgsError::NoConvergence(Box::new(Equilibrium {
            point,
            cost,
            grad_norm,
            stability: Stability::undetermined(),
            leading_direction: None,
        }))
    };
    match outcome {
        Ok((state, EndReason::Stopped)) => {
            let grad_norm = norm(&state.dx);
            let (stability, dir) = analyze(sys, &state.x, settings);
            Ok(Equilibrium {
                point: state.x,
                cost: state.aux,
                grad_norm,
                stability,
                leading_direction: dir,
            })
        }
        Ok((_, EndReason::TimeReached)) | Err((StepFailure::StepLimit, _, _)) => {
            Err(unconverged(best))
        }
        Err((StepFailure::StepUnderflow, _, _)) if best.is_some() => Err(unconverged(best)),
        Err((_, _, Some(e))) => Err(e),
        Err(_) => Err(QgsError::NumericalBlowup),
    }
}

/// Follows the gradient flow from `x0` to an equilibrium.
pub fn integrate_forward(
    sys: &ConstraintSystem,
    x0: &[f64],
    settings: &QgsSettings,
) -> Result<Equilibrium, QgsError> {
    integrate_forward_observed(sys, x0, settings, |_, _, _| {})
}

/// Integrates the time-reversed flow `ẋ = +∇f(x)` for `horizon`.
/// Returns `None` when the trajectory diverges.
pub fn integrate_backward(
    sys: &ConstraintSystem,
    x0: &[f64],
    horizon: f64,
    settings: &QgsSettings,
) -> Option<Vec<f64>> {
    let rhs = |x: &[f64], dx: &mut [f64]| sys.cost_and_gradient(x, dx);
    match dopri5(rhs, x0, stepper_options(settings, horizon), |_, _, _, _| {
        Control::Continue
    }) {
        Ok((state, _)) if state.x.iter().all(|v| v.is_finite()) => Some(state.x),
        _ => None,
    }
}

/// Candidate restart points outside the stability region of `eq`.
///
/// Each candidate perturbs `eq.point` by `escape_eps` along a direction (the
/// leading eigenvector first, both signs, then random unit vectors), runs the
/// reversed flow for `backward_horizon`, and steps a further `escape_eps`
/// along the outward direction from `eq.point`. Diverging reverse
/// trajectories are dropped. With `escape_eps == 0` every candidate is
/// `eq.point` itself.
pub fn escape<R: Rng + ?Sized>(
    sys: &ConstraintSystem,
    eq: &Equilibrium,
    settings: &QgsSettings,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let count = settings.escape_candidates.min(settings.max_attempts());
    let n = eq.point.len();
    if settings.escape_eps == 0.0 {
        return vec![eq.point.clone(); count];
    }
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(count);
    if let Some(v) = &eq.leading_direction {
        if norm(v) > 0.0 {
            directions.push(v.clone());
            directions.push(v.iter().map(|a| -a).collect());
        }
    }
    while directions.len() < count {
        let mut d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let dn = norm(&d);
        if dn == 0.0 {
            continue;
        }
        d.iter_mut().for_each(|v| *v /= dn);
        directions.push(d);
    }
    directions.truncate(count);

    let eps = settings.escape_eps;
    directions
        .iter()
        .filter_map(|d| {
            let start: Vec<f64> = eq.point.iter().zip(d).map(|(p, di)| p + eps * di).collect();
            let end = integrate_backward(sys, &start, settings.backward_horizon, settings)?;
            let out: Vec<f64> = end.iter().zip(&eq.point).map(|(a, b)| a - b).collect();
            let on = norm(&out);
            let dir = if on > 0.0 { out } else { d.clone() };
            let dn = if on > 0.0 { on } else { 1.0 };
            let cand: Vec<f64> = end
                .iter()
                .zip(&dir)
                .map(|(a, b)| a + eps * b / dn)
                .collect();
            (norm(&cand) <= settings.blowup_norm).then_some(cand)
        })
        .collect()
}

/// RNG stream for one enumeration attempt.
pub fn attempt_rng(seed: u64, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt as u64);
    rng
}

/// Alternates forward integration and escape to collect distinct equilibria.
///
/// Starts are consumed breadth-first. If the queue runs dry before the
/// attempt budget, the next start is a Gaussian perturbation (scale
/// `escape_eps`) of `x0`.
pub fn enumerate_minima(
    sys: &ConstraintSystem,
    x0: &[f64],
    settings: &QgsSettings,
) -> Result<MinimaSet, QgsError> {
    settings.validate()?;
    let dedup = settings.dedup_distance(sys.dim_x());
    let max_attempts = settings.max_attempts();
    let mut queue: VecDeque<Vec<f64>> = VecDeque::from([x0.to_vec()]);
    let mut found: Vec<Equilibrium> = Vec::new();
    let mut attempts = 0usize;
    let mut last_err = None;

    while found.len() < settings.target_minima && attempts < max_attempts {
        let mut rng = attempt_rng(settings.seed, attempts);
        let start = match queue.pop_front() {
            Some(s) => s,
            None => {
                let scale = settings.escape_eps.max(1e-3);
                x0.iter()
                    .map(|v| v + scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        };
        attempts += 1;
        match integrate_forward(sys, &start, settings) {
            Ok(eq) => {
                let novel = found.iter().all(|f| distance(&f.point, &eq.point) >= dedup);
                if novel {
                    let cands = escape(sys, &eq, settings, &mut rng);
                    queue.extend(cands);
                    found.push(eq);
                }
            }
            Err(e @ (QgsError::NoConvergence(_) | QgsError::NumericalBlowup)) => last_err = Some(e),
            Err(QgsError::NonFiniteResidual { .. } | QgsError::NonFiniteGradient { .. }) => {
                last_err = Some(QgsError::NumericalBlowup)
            }
            Err(e) => return Err(e),
        }
    }

    if found.is_empty() {
        return Err(QgsError::NoMinimaFound {
            attempts,
            last: last_err.map(|e| e.to_string()),
        });
    }
    // Stable sort keeps discovery order among equal costs.
    found.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    Ok(MinimaSet {
        schema_version: MINIMA_SCHEMA_VERSION,
        settings: settings.clone(),
        items: found,
        attempts_used: attempts,
    })
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qgs::testing::{circle_line, double_well, infeasible_pair, linear_shift};
    use crate::qgs::{cost, StabilityTag};

    fn sys(map: std::sync::Arc<dyn crate::qgs::ResidualMap>) -> ConstraintSystem {
        ConstraintSystem::new(map).unwrap()
    }

    #[test]
    fn linear_flow_reaches_origin() {
        let s = sys(linear_shift(&[0.0]));
        let eq = integrate_forward(&s, &[5.0], &QgsSettings::default()).unwrap();
        assert!(eq.point[0].abs() < 1e-7);
        assert!(eq.cost < 1e-14);
        assert!(eq.grad_norm < 1e-8);
        assert_eq!(eq.stability.tag, StabilityTag::Stable);
    }

    #[test]
    fn circle_line_from_one_zero() {
        let s = sys(circle_line());
        let eq = integrate_forward(&s, &[1.0, 0.0], &QgsSettings::default()).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((eq.point[0] - r).abs() < 1e-6 && (eq.point[1] - r).abs() < 1e-6);
        assert!(eq.cost < 1e-12);
    }

    #[test]
    fn infeasible_pair_stationary_point() {
        // Bisection root of 2x³ + x − 1 = 0.
        const ROOT: f64 = 0.589_754_512_301_458_4;
        let s = sys(infeasible_pair());
        let eq = integrate_forward(&s, &[0.0], &QgsSettings::default()).unwrap();
        assert!((eq.point[0] - ROOT).abs() < 1e-7);
        assert!(eq.cost > 0.1);
        assert!((eq.cost - cost(&s, &eq.point).unwrap()).abs() <= 1e-9 * eq.cost);
    }

    #[test]
    fn no_convergence_carries_best_point() {
        let s = sys(linear_shift(&[0.0]));
        let settings = QgsSettings {
            max_time: 0.5,
            ..Default::default()
        };
        match integrate_forward(&s, &[5.0], &settings) {
            Err(QgsError::NoConvergence(best)) => {
                assert!(best.point[0] < 5.0 && best.point[0] > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn escape_from_linear_minimum_moves_uphill() {
        let s = sys(linear_shift(&[0.0]));
        let settings = QgsSettings {
            escape_eps: 0.1,
            ..Default::default()
        };
        let eq = integrate_forward(&s, &[1.0], &settings).unwrap();
        let cands = escape(&s, &eq, &settings, &mut attempt_rng(1, 0));
        assert!(!cands.is_empty());
        assert!(cands.iter().all(|c| c[0].abs() > 0.1));
    }

    #[test]
    fn escape_crosses_double_well_barrier() {
        let s = sys(double_well());
        let settings = QgsSettings::default();
        let eq = integrate_forward(&s, &[0.8], &settings).unwrap();
        assert!((eq.point[0] - 1.0).abs() < 1e-6);
        let cands = escape(&s, &eq, &settings, &mut attempt_rng(3, 0));
        assert!(cands.iter().any(|c| c[0] < 0.0));
    }

    #[test]
    fn zero_eps_escape_is_noop() {
        let s = sys(double_well());
        let settings = QgsSettings {
            escape_eps: 0.0,
            ..Default::default()
        };
        let eq = integrate_forward(&s, &[0.8], &settings).unwrap();
        let cands = escape(&s, &eq, &settings, &mut attempt_rng(0, 0));
        assert_eq!(cands.len(), settings.escape_candidates);
        assert!(cands.iter().all(|c| c == &eq.point));
    }

    #[test]
    fn enumerate_linear_single_minimum() {
        let s = sys(linear_shift(&[0.0]));
        let set = enumerate_minima(&s, &[2.0], &QgsSettings::default()).unwrap();
        assert_eq!(set.items.len(), 1);
        assert!(set.items[0].point[0].abs() < 1e-7);
    }

    #[test]
    fn enumerate_double_well_finds_both() {
        let s = sys(double_well());
        let settings = QgsSettings {
            target_minima: 2,
            ..Default::default()
        };
        let set = enumerate_minima(&s, &[0.3], &settings).unwrap();
        assert_eq!(set.items.len(), 2);
        let mut pts: Vec<f64> = set.items.iter().map(|e| e.point[0]).collect();
        pts.sort_by(f64::total_cmp);
        assert!((pts[0] + 1.0).abs() < 1e-4 && (pts[1] - 1.0).abs() < 1e-4);
        assert!(set.items.windows(2).all(|w| w[0].cost <= w[1].cost));
    }

    #[test]
    fn enumerate_circle_line_finds_both_intersections() {
        let s = sys(circle_line());
        let settings = QgsSettings {
            target_minima: 2,
            ..Default::default()
        };
        let set = enumerate_minima(&s, &[1.0, 0.0], &settings).unwrap();
        assert_eq!(set.items.len(), 2);
        let signs: Vec<bool> = set.items.iter().map(|e| e.point[0] > 0.0).collect();
        assert_ne!(signs[0], signs[1]);
    }

    #[test]
    fn enumeration_is_deterministic() {
        let s = sys(double_well());
        let settings = QgsSettings {
            target_minima: 2,
            seed: 42,
            ..Default::default()
        };
        let a = enumerate_minima(&s, &[0.3], &settings).unwrap().to_json();
        let b = enumerate_minima(&s, &[0.3], &settings).unwrap().to_json();
        assert_eq!(a, b);
        let back = MinimaSet::from_json(&a).unwrap();
        assert_eq!(back.to_json(), a);
    }

    #[test]
    fn no_minima_found_when_nothing_converges() {
        let s = sys(linear_shift(&[0.0]));
        let settings = QgsSettings {
            max_time: 1e-3,
            max_attempts: Some(3),
            ..Default::default()
        };
        assert!(matches!(
            enumerate_minima(&s, &[5.0], &settings),
            Err(QgsError::NoMinimaFound { attempts: 3, .. })
        ));
    }
}
