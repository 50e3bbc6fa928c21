//! Dormand–Prince 5(4) embedded Runge–Kutta pair with adaptive step size.
//!
//! Works on autonomous systems `ẋ = F(x)`. The right-hand side also returns a
//! scalar (the cost in our use) so observers see it without re-evaluating.

use super::QgsError;

const A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
    ],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    // Fifth-order weights; the last stage is evaluated at the new point (FSAL).
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

// Largest h·λ allowed along the estimated stiff direction. The stability
// function is about 0.57 at −3, so stiff modes decay instead of ringing at the
// edge of the stability interval (about −3.3).
const STIFF_LIMIT: f64 = 3.0;

// b − b̂ (fifth minus fourth order weights)
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[derive(Debug, Clone, Copy)]
pub(crate) struct StepperOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub t_end: f64,
    pub max_steps: usize,
    pub blowup_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EndReason {
    /// The observer asked to stop.
    Stopped,
    /// `t_end` was reached.
    TimeReached,
}

#[derive(Debug)]
pub(crate) enum StepFailure {
    Blowup,
    StepLimit,
    StepUnderflow,
}

/// Final state of an integration run.
#[derive(Debug, Clone)]
pub(crate) struct StepperState {
    pub x: Vec<f64>,
    pub dx: Vec<f64>,
    pub aux: f64,
}

fn error_norm(err: &[f64], x0: &[f64], x1: &[f64], atol: f64, rtol: f64) -> f64 {
    let n = err.len().max(1) as f64;
    let s: f64 = err
        .iter()
        .zip(x0.iter().zip(x1))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Integrates from `x0` until the observer stops, `t_end` is reached, or a
/// failure occurs. On failure the last accepted state is returned alongside.
///
/// The observer is called once at `t = 0` and after every accepted step.
pub(crate) fn dopri5<R, O>(
    mut rhs: R,
    x0: &[f64],
    opts: StepperOptions,
    mut observer: O,
) -> Result<(StepperState, EndReason), (StepFailure, Option<StepperState>, Option<QgsError>)>
where
    R: FnMut(&[f64], &mut [f64]) -> Result<f64, QgsError>,
    O: FnMut(f64, &[f64], &[f64], f64) -> Control,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let aux0 = match rhs(&x, &mut k[0]) {
        Ok(a) => a,
        Err(e) => return Err((StepFailure::Blowup, None, Some(e))),
    };
    let mut state = StepperState {
        x: x.clone(),
        dx: k[0].clone(),
        aux: aux0,
    };
    if observer(0.0, &x, &k[0], aux0) == Control::Stop {
        return Ok((state, EndReason::Stopped));
    }
    if opts.t_end <= 0.0 {
        return Ok((state, EndReason::TimeReached));
    }

    let mut h = initial_step(&mut rhs, &x, &k[0], opts).min(opts.t_end);
    let mut t = 0.0_f64;
    let mut xs = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut x_stiff = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut last_rejected = false;
    let mut aux_new = aux0;
    let mut steps = 0usize;

    loop {
        if steps >= opts.max_steps {
            return Err((StepFailure::StepLimit, Some(state), None));
        }
        steps += 1;
        if h < 1e-14 * t.abs().max(1.0) {
            return Err((StepFailure::StepUnderflow, Some(state), None));
        }
        let last = t + h >= opts.t_end;
        if last {
            h = opts.t_end - t;
        }

        let mut stage_ok = true;
        for s in 0..6 {
            let row = A[s];
            for i in 0..n {
                let mut acc = 0.0;
                for (j, a) in row.iter().enumerate() {
                    acc += a * k[j][i];
                }
                xs[i] = x[i] + h * acc;
            }
            match rhs(&xs, &mut k[s + 1]) {
                Ok(a) => {
                    if s == 5 {
                        aux_new = a;
                    }
                }
                Err(_) => {
                    stage_ok = false;
                    break;
                }
            }
            match s {
                4 => x_stiff.copy_from_slice(&xs),
                5 => x_new.copy_from_slice(&xs),
                _ => {}
            }
        }

        let err_norm = if stage_ok && x_new.iter().all(|v| v.is_finite()) {
            for i in 0..n {
                let mut e = 0.0;
                for (j, ej) in E.iter().enumerate() {
                    e += ej * k[j][i];
                }
                err[i] = h * e;
            }
            error_norm(&err, &x, &x_new, opts.abs_tol, opts.rel_tol)
        } else {
            f64::INFINITY
        };

        if err_norm <= 1.0 {
            // Stages 6 and 7 share the abscissa, so their slope difference over
            // their distance estimates the stiffest local eigenvalue.
            let mut dk = 0.0;
            let mut dx = 0.0;
            for i in 0..n {
                dk += (k[6][i] - k[5][i]).powi(2);
                dx += (x_new[i] - x_stiff[i]).powi(2);
            }
            let rho = if dx > 0.0 { (dk / dx).sqrt() } else { 0.0 };
            t = if last { opts.t_end } else { t + h };
            std::mem::swap(&mut x, &mut x_new);
            k.swap(0, 6);
            if norm(&x) > opts.blowup_norm {
                return Err((StepFailure::Blowup, Some(state), None));
            }
            state = StepperState {
                x: x.clone(),
                dx: k[0].clone(),
                aux: aux_new,
            };
            if observer(t, &x, &k[0], aux_new) == Control::Stop {
                return Ok((state, EndReason::Stopped));
            }
            if last {
                return Ok((state, EndReason::TimeReached));
            }
            let mut fac = if err_norm == 0.0 {
                5.0
            } else {
                (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
            };
            if last_rejected {
                fac = fac.min(1.0);
            }
            h *= fac;
            if rho > 0.0 {
                h = h.min(STIFF_LIMIT / rho);
            }
            last_rejected = false;
        } else {
            let fac = if err_norm.is_finite() {
                (0.9 * err_norm.powf(-0.2)).clamp(0.1, 0.9)
            } else {
                0.1
            };
            h *= fac;
            last_rejected = true;
        }
    }
}

/// Starting step heuristic from Hairer, Nørsett & Wanner (order 5).
fn initial_step<R>(rhs: &mut R, x0: &[f64], f0: &[f64], opts: StepperOptions) -> f64
where
    R: FnMut(&[f64], &mut [f64]) -> Result<f64, QgsError>,
{
    let sc: Vec<f64> = x0
        .iter()
        .map(|v| opts.abs_tol + opts.rel_tol * v.abs())
        .collect();
    let rms = |v: &[f64]| {
        (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / v.len().max(1) as f64)
            .sqrt()
    };
    let d0 = rms(x0);
    let d1 = rms(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let x1: Vec<f64> = x0.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; x0.len()];
    if rhs(&x1, &mut f1).is_err() {
        return h0;
    }
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(t_end: f64) -> StepperOptions {
        StepperOptions {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            t_end,
            max_steps: 100_000,
            blowup_norm: 1e12,
        }
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let (st, end) = dopri5(
            |x, dx| {
                dx[0] = -x[0];
                Ok(0.0)
            },
            &[1.0],
            opts(3.0),
            |_, _, _, _| Control::Continue,
        )
        .unwrap();
        assert_eq!(end, EndReason::TimeReached);
        assert!((st.x[0] - (-3.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn harmonic_oscillator_conserves_phase() {
        let (st, _) = dopri5(
            |x, dx| {
                dx[0] = x[1];
                dx[1] = -x[0];
                Ok(0.0)
            },
            &[1.0, 0.0],
            opts(std::f64::consts::PI),
            |_, _, _, _| Control::Continue,
        )
        .unwrap();
        assert!((st.x[0] + 1.0).abs() < 1e-8);
        assert!(st.x[1].abs() < 1e-8);
    }

    #[test]
    fn finite_time_blowup_is_reported() {
        let res = dopri5(
            |x, dx| {
                dx[0] = x[0] * x[0];
                Ok(0.0)
            },
            &[1.0],
            StepperOptions {
                blowup_norm: 1e6,
                ..opts(5.0)
            },
            |_, _, _, _| Control::Continue,
        );
        assert!(matches!(
            res,
            Err((
                StepFailure::Blowup | StepFailure::StepUnderflow | StepFailure::StepLimit,
                _,
                _
            ))
        ));
    }

    #[test]
    fn observer_can_stop_early() {
        let mut calls = 0;
        let (st, end) = dopri5(
            |x, dx| {
                dx[0] = -x[0];
                Ok(x[0])
            },
            &[1.0],
            opts(100.0),
            |_, x, _, _| {
                calls += 1;
                if x[0] < 0.5 {
                    Control::Stop
                } else {
                    Control::Continue
                }
            },
        )
        .unwrap();
        assert_eq!(end, EndReason::Stopped);
        assert!(st.x[0] < 0.5 && st.aux == st.x[0]);
        assert!(calls > 1);
    }
}
