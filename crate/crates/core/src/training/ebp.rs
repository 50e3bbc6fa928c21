use serde::{Deserialize, Serialize};

use super::{
    accuracy_of, assemble, check_bound, check_fraction, check_samples, clamp_all, init_rng,
    normal_init, stratified_split, ModelParts, TrainError, TrainedModel, Trainer,
};
use crate::digest::json_digest;
use crate::network::{
    check_param_len, NetworkResiduals, NetworkShape, SequenceSample, StatePolicy,
};
use crate::qgs::ResidualMap;

/// Batch gradient descent with momentum on `½·sse`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EbpConfig {
    /// Step applied to the per-sample mean gradient.
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub init_sigma: f64,
    pub bound: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for EbpConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 1000,
            init_sigma: 0.5,
            bound: 10.0,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl EbpConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(
                "momentum must lie in [0, 1)".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be ≥ 1".into()));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(TrainError::InvalidConfig("init_sigma must be ≥ 0".into()));
        }
        check_bound(self.bound)?;
        check_fraction(self.validation_fraction)
    }
}

/// Final model plus the fit-set sse before every epoch and after the last.
#[derive(Debug, Clone)]
pub struct EbpOutcome {
    pub model: TrainedModel,
    pub sse_history: Vec<f64>,
}

pub fn train_ebp(
    samples: &[SequenceSample],
    shape: NetworkShape,
    config: &EbpConfig,
    policy: &StatePolicy,
) -> Result<TrainedModel, TrainError> {
    Ok(train_ebp_from(samples, shape, config, policy, None)?.model)
}

pub fn train_ebp_from(
    samples: &[SequenceSample],
    shape: NetworkShape,
    config: &EbpConfig,
    policy: &StatePolicy,
    warm_start: Option<&[f64]>,
) -> Result<EbpOutcome, TrainError> {
    config.validate()?;
    check_samples(shape, samples)?;
    let split = stratified_split(samples, config.validation_fraction, config.seed)?;
    let map = NetworkResiduals::new(shape, split.fit.clone(), policy)?;
    let np = shape.param_count();
    let mut x = match warm_start {
        Some(w) => {
            check_param_len(np, w.len())?;
            w.to_vec()
        }
        None => normal_init(np, config.init_sigma, &mut init_rng(config.seed)),
    };
    clamp_all(&mut x, config.bound);

    let inv_n = 1.0 / split.fit.len() as f64;
    let mut h = vec![0.0; map.output_dim()];
    let mut g = vec![0.0; np];
    let mut vel = vec![0.0; np];
    let mut history = Vec::with_capacity(config.epochs + 1);
    let mut initial = None;
    for epoch in 0..=config.epochs {
        map.residual_and_gradient(&x, &mut h, &mut g);
        let sse: f64 = h.iter().map(|v| v * v).sum();
        let first = *initial.get_or_insert(sse);
        if !sse.is_finite() || sse > 1e6 * first.max(f64::MIN_POSITIVE) {
            return Err(TrainError::Diverged { epoch, sse });
        }
        history.push(sse);
        if epoch == config.epochs {
            break;
        }
        for ((xi, vi), gi) in x.iter_mut().zip(&mut vel).zip(&g) {
            *vi = config.momentum * *vi - config.learning_rate * gi * inv_n;
            *xi = (*xi + *vi).clamp(-config.bound, config.bound);
        }
    }

    let acc = accuracy_of(shape, &x, &split.validation, policy)?;
    let model = assemble(ModelParts {
        shape,
        x,
        policy,
        cost: 0.5 * history.last().copied().unwrap_or(0.0),
        validation_accuracy: acc,
        method: Trainer::Ebp,
        config_digest: json_digest(config),
        seed: config.seed,
        minima_count: 1,
        bound: config.bound,
        evaluations: config.epochs as u64 + 1,
    });
    Ok(EbpOutcome {
        model,
        sse_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::xor;
    use super::*;
    use crate::network::Parameters;

    #[test]
    fn vanishing_rate_leaves_parameters_unchanged() {
        let shape = NetworkShape::new(2, 3, 2).unwrap();
        let start = normal_init(shape.param_count(), 0.5, &mut init_rng(4));
        let cfg = EbpConfig {
            learning_rate: 1e-300,
            epochs: 50,
            ..Default::default()
        };
        let out =
            train_ebp_from(&xor(), shape, &cfg, &StatePolicy::default(), Some(&start)).unwrap();
        assert_eq!(out.model.x, start);
    }

    #[test]
    fn first_epoch_decreases_sse() {
        let shape = NetworkShape::new(1, 1, 2).unwrap();
        let samples = vec![
            SequenceSample::one_hot(vec![1.0], 0, 2, "a"),
            SequenceSample::one_hot(vec![-1.0], 1, 2, "b"),
        ];
        let start = Parameters::unflatten(&[0.3, -0.2, 0.4, 0.1], shape)
            .unwrap()
            .flatten();
        let cfg = EbpConfig {
            learning_rate: 1e-3,
            epochs: 1,
            ..Default::default()
        };
        let out =
            train_ebp_from(&samples, shape, &cfg, &StatePolicy::default(), Some(&start)).unwrap();
        assert!(out.sse_history[1] < out.sse_history[0]);
    }

    #[test]
    fn huge_rate_reports_divergence() {
        let shape = NetworkShape::new(2, 4, 2).unwrap();
        let cfg = EbpConfig {
            learning_rate: 1e9,
            momentum: 0.0,
            epochs: 20,
            bound: 1e12,
            ..Default::default()
        };
        assert!(matches!(
            train_ebp(&xor(), shape, &cfg, &StatePolicy::default()),
            Err(TrainError::Diverged { .. })
        ));
    }

    #[test]
    fn xor_reaches_three_of_four_for_some_seed() {
        let shape = NetworkShape::new(2, 4, 2).unwrap();
        let best = (0..5)
            .map(|seed| {
                let cfg = EbpConfig {
                    learning_rate: 0.1,
                    epochs: 5000,
                    seed,
                    ..Default::default()
                };
                let m = train_ebp(&xor(), shape, &cfg, &StatePolicy::default()).unwrap();
                assert!(m.x.iter().all(|v| v.abs() <= cfg.bound + 1e-9));
                m.accuracy(&xor()).unwrap()
            })
            .fold(0.0, f64::max);
        assert!(best >= 0.75);
    }

    #[test]
    fn reproducible() {
        let shape = NetworkShape::new(2, 4, 2).unwrap();
        let cfg = EbpConfig {
            epochs: 200,
            seed: 3,
            ..Default::default()
        };
        let a = train_ebp(&xor(), shape, &cfg, &StatePolicy::default()).unwrap();
        let b = train_ebp(&xor(), shape, &cfg, &StatePolicy::default()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }
}
