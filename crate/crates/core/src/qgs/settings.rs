use serde::{Deserialize, Serialize};

use super::QgsError;

/// Numerical knobs for trajectory integration and minima enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QgsSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Equilibrium threshold on `‖∇f(x)‖₂`.
    pub grad_tol: f64,
    /// Pseudo-time budget for one forward trajectory.
    pub max_time: f64,
    /// Accepted-plus-rejected step budget for one trajectory.
    pub max_steps: usize,
    pub target_minima: usize,
    /// Forward integrations allowed in one enumeration. `None` means
    /// `10 · target_minima`.
    pub max_attempts: Option<usize>,
    pub escape_eps: f64,
    /// Escape directions tried per new equilibrium.
    pub escape_candidates: usize,
    pub backward_horizon: f64,
    /// Minimum distance between distinct equilibria.
    pub dedup_dist: f64,
    /// Multiply `dedup_dist` by `√dim_x`.
    pub dedup_scale_with_dim: bool,
    /// State norm treated as divergence during integration.
    pub blowup_norm: f64,
    /// Krylov steps for the leading-eigenvalue estimate on large systems.
    pub stability_probe_steps: usize,
    pub seed: u64,
}

impl Default for QgsSettings {
    fn default() -> Self {
        Self {
            abs_tol: 1e-8,
            rel_tol: 1e-8,
            grad_tol: 1e-8,
            max_time: 1e4,
            max_steps: 200_000,
            target_minima: 1,
            max_attempts: None,
            escape_eps: 0.5,
            escape_candidates: 4,
            backward_horizon: 5.0,
            dedup_dist: 1e-4,
            dedup_scale_with_dim: true,
            blowup_norm: 1e8,
            stability_probe_steps: 40,
            seed: 0,
        }
    }
}

impl QgsSettings {
    pub fn validate(&self) -> Result<(), QgsError> {
        let positive = [
            ("abs_tol", self.abs_tol),
            ("rel_tol", self.rel_tol),
            ("grad_tol", self.grad_tol),
            ("max_time", self.max_time),
            ("dedup_dist", self.dedup_dist),
            ("blowup_norm", self.blowup_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(QgsError::InvalidSettings(format!("{name} must be > 0")));
            }
        }
        if self.target_minima == 0 {
            return Err(QgsError::InvalidSettings(
                "target_minima must be ≥ 1".into(),
            ));
        }
        if self.max_attempts == Some(0) {
            return Err(QgsError::InvalidSettings("max_attempts must be ≥ 1".into()));
        }
        if self.max_steps == 0 {
            return Err(QgsError::InvalidSettings("max_steps must be ≥ 1".into()));
        }
        if !(self.escape_eps >= 0.0) || !(self.backward_horizon >= 0.0) {
            return Err(QgsError::InvalidSettings(
                "escape_eps and backward_horizon must be ≥ 0".into(),
            ));
        }
        Ok(())
    }

    pub fn max_attempts(&self) -> usize {
        self.max_attempts.unwrap_or(10 * self.target_minima)
    }

    pub fn dedup_distance(&self, dim_x: usize) -> f64 {
        if self.dedup_scale_with_dim {
            self.dedup_dist * (dim_x as f64).sqrt()
        } else {
            self.dedup_dist
        }
    }
}
