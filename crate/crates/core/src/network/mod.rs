//! Partially recurrent three-layer network.
//!
//! `z(k) = tanh(W u(k) + diag(p) z(k−1))`, `ŷ(k) = V z(k)`. Hidden units feed
//! back only to themselves through the diagonal `p`; the output layer is
//! linear with no bias.
//!
//! Parameters flatten as `(v₁,…,v_m, w₁,…,w_m, p)` where `v_j` is column `j`
//! of `V` (the outgoing weights of hidden unit `j`) and `w_j` is row `j` of
//! `W` (its incoming weights).

mod forward;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use forward::{activation, residual_jacobian, residuals, sse, step, NetworkResiduals};

pub(crate) use forward::validate_samples as forward_checks;

pub const PARAMETERS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("network shape dimensions must all be ≥ 1")]
    EmptyShape,
    #[error("sample {id} has no input steps")]
    EmptySequence { id: String },
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), NetworkError> {
    if expected != got {
        return Err(NetworkError::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

pub(crate) fn check_param_len(expected: usize, got: usize) -> Result<(), NetworkError> {
    check_len("flattened parameters", expected, got)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkShape {
    /// Input dimension.
    pub n: usize,
    /// Hidden units.
    #[serde(rename = "m")]
    pub hidden: usize,
    /// Output dimension.
    pub q: usize,
}

impl NetworkShape {
    pub fn new(n: usize, hidden: usize, q: usize) -> Result<Self, NetworkError> {
        if n == 0 || hidden == 0 || q == 0 {
            return Err(NetworkError::EmptyShape);
        }
        Ok(Self { n, hidden, q })
    }

    /// `n_p = m·n + q·m + m`.
    pub fn param_count(&self) -> usize {
        self.hidden * self.n + self.q * self.hidden + self.hidden
    }

    pub(crate) fn v_index(&self, out: usize, hidden: usize) -> usize {
        hidden * self.q + out
    }

    pub(crate) fn w_offset(&self) -> usize {
        self.q * self.hidden
    }

    pub(crate) fn w_index(&self, hidden: usize, input: usize) -> usize {
        self.w_offset() + hidden * self.n + input
    }

    pub(crate) fn p_index(&self, hidden: usize) -> usize {
        self.w_offset() + self.hidden * self.n + hidden
    }
}

/// Network weights in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// `m × n` input weights.
    pub w: DMatrix<f64>,
    /// `q × m` output weights.
    pub v: DMatrix<f64>,
    /// Diagonal of the recurrent matrix `P`.
    pub p: DVector<f64>,
}

impl Parameters {
    pub fn zeros(shape: NetworkShape) -> Self {
        Self {
            w: DMatrix::zeros(shape.hidden, shape.n),
            v: DMatrix::zeros(shape.q, shape.hidden),
            p: DVector::zeros(shape.hidden),
        }
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            n: self.w.ncols(),
            hidden: self.w.nrows(),
            q: self.v.nrows(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let shape = self.shape();
        let mut x = vec![0.0; shape.param_count()];
        for j in 0..shape.hidden {
            for k in 0..shape.q {
                x[shape.v_index(k, j)] = self.v[(k, j)];
            }
            for l in 0..shape.n {
                x[shape.w_index(j, l)] = self.w[(j, l)];
            }
            x[shape.p_index(j)] = self.p[j];
        }
        x
    }

    pub fn unflatten(x: &[f64], shape: NetworkShape) -> Result<Self, NetworkError> {
        check_len("flattened parameters", shape.param_count(), x.len())?;
        let mut p = Self::zeros(shape);
        for j in 0..shape.hidden {
            for k in 0..shape.q {
                p.v[(k, j)] = x[shape.v_index(k, j)];
            }
            for l in 0..shape.n {
                p.w[(j, l)] = x[shape.w_index(j, l)];
            }
            p.p[j] = x[shape.p_index(j)];
        }
        Ok(p)
    }
}

/// One training or evaluation sequence; the target applies to the output at
/// the final step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub inputs: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub id: String,
}

impl SequenceSample {
    /// Single-step sample with a one-hot target.
    pub fn one_hot(
        input: Vec<f64>,
        class_index: usize,
        classes: usize,
        id: impl Into<String>,
    ) -> Self {
        let mut target = vec![0.0; classes];
        target[class_index] = 1.0;
        Self {
            inputs: vec![input],
            target,
            id: id.into(),
        }
    }

    /// Index of the largest target component.
    pub fn target_class(&self) -> usize {
        argmax(&self.target)
    }
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateMode {
    /// Hidden state restarts from `z0` at every sample.
    #[default]
    ResetPerSample,
    /// Hidden state carries from one sample to the next in dataset order.
    Chained,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatePolicy {
    pub mode: StateMode,
    /// Initial hidden state; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z0: Option<Vec<f64>>,
}

impl StatePolicy {
    pub fn chained() -> Self {
        Self {
            mode: StateMode::Chained,
            z0: None,
        }
    }

    pub(crate) fn initial_state(&self, hidden: usize) -> Result<Vec<f64>, NetworkError> {
        match &self.z0 {
            Some(z) => {
                check_len("initial state z0", hidden, z.len())?;
                Ok(z.clone())
            }
            None => Ok(vec![0.0; hidden]),
        }
    }
}

/// On-disk form of trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametersDocument {
    pub schema_version: u32,
    pub shape: NetworkShape,
    pub x: Vec<f64>,
    pub state_policy: StatePolicy,
    pub feature_config_digest: String,
}

impl ParametersDocument {
    pub fn new(params: &Parameters, policy: &StatePolicy, feature_config_digest: &str) -> Self {
        Self {
            schema_version: PARAMETERS_SCHEMA_VERSION,
            shape: params.shape(),
            x: params.flatten(),
            state_policy: policy.clone(),
            feature_config_digest: feature_config_digest.to_string(),
        }
    }

    pub fn parameters(&self) -> Result<Parameters, NetworkError> {
        Parameters::unflatten(&self.x, self.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flatten_order_scalar() {
        let shape = NetworkShape::new(1, 1, 1).unwrap();
        let mut p = Parameters::zeros(shape);
        p.w[(0, 0)] = 2.0;
        p.v[(0, 0)] = 3.0;
        p.p[0] = 4.0;
        assert_eq!(p.flatten(), vec![3.0, 2.0, 4.0]);
    }

    #[test]
    fn flatten_groups_by_hidden_unit() {
        let shape = NetworkShape::new(2, 2, 3).unwrap();
        let mut p = Parameters::zeros(shape);
        // Column 1 of V is v₂, row 1 of W is w₂.
        p.v[(0, 1)] = 1.0;
        p.v[(2, 1)] = 2.0;
        p.w[(1, 0)] = 5.0;
        p.p[1] = 7.0;
        let x = p.flatten();
        assert_eq!(&x[3..6], &[1.0, 0.0, 2.0]);
        assert_eq!(&x[6..10], &[0.0, 0.0, 5.0, 0.0]);
        assert_eq!(&x[10..12], &[0.0, 7.0]);
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(NetworkShape::new(2, 3, 1).unwrap().param_count(), 12);
        assert_eq!(NetworkShape::new(0, 3, 1), Err(NetworkError::EmptyShape));
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let shape = NetworkShape::new(2, 3, 1).unwrap();
        assert!(matches!(
            Parameters::unflatten(&[0.0; 11], shape),
            Err(NetworkError::Dimension {
                expected: 12,
                got: 11,
                ..
            })
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    proptest! {
        #[test]
        fn flatten_roundtrip_is_bitwise(n in 1usize..6, m in 1usize..6, q in 1usize..5, seed in any::<u64>()) {
            let shape = NetworkShape::new(n, m, q).unwrap();
            let mut s = seed;
            let x: Vec<f64> = (0..shape.param_count()).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits((s >> 12) | 0x3ff0_0000_0000_0000) - 1.5
            }).collect();
            let p = Parameters::unflatten(&x, shape).unwrap();
            let back = p.flatten();
            prop_assert!(back.iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(Parameters::unflatten(&back, shape).unwrap(), p);
        }
    }
}
