//! Network training: QGS minima enumeration plus EBP and GA baselines.

mod ebp;
mod ga;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::json_digest;
use crate::network::{
    argmax, NetworkError, NetworkResiduals, NetworkShape, Parameters, ParametersDocument,
    SequenceSample, StatePolicy, PARAMETERS_SCHEMA_VERSION,
};
use crate::qgs::{
    add_slack, enumerate_minima, ConstraintSystem, MinimaSet, QgsError, QgsSettings, ResidualMap,
};

pub use ebp::{train_ebp, train_ebp_from, EbpConfig, EbpOutcome};
pub use ga::{train_ga, train_ga_with_history, GaConfig, GaOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training set must contain at least two classes")]
    TooFewClasses,
    #[error("validation split lacks class {class}")]
    DegenerateSplit { class: usize },
    #[error("training diverged at epoch {epoch} (sse {sse})")]
    Diverged { epoch: usize, sse: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Qgs(#[from] QgsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Trainer {
    #[default]
    Qgs,
    Ga,
    Ebp,
}

impl Trainer {
    pub const ALL: [Trainer; 3] = [Trainer::Qgs, Trainer::Ga, Trainer::Ebp];

    pub fn name(self) -> &'static str {
        match self {
            Trainer::Qgs => "qgs",
            Trainer::Ga => "ga",
            Trainer::Ebp => "ebp",
        }
    }
}

impl std::str::FromStr for Trainer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qgs" => Ok(Trainer::Qgs),
            "ga" => Ok(Trainer::Ga),
            "ebp" => Ok(Trainer::Ebp),
            _ => Err(format!("unknown trainer {s:?} (expected qgs, ga or ebp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Standard deviation of the zero-mean normal initializer.
    pub init_sigma: f64,
    /// Every parameter is kept in `[-bound, bound]`.
    pub bound: f64,
    pub target_minima: usize,
    /// Share of each class held out for minimum selection.
    pub validation_fraction: f64,
    pub state_policy: StatePolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            init_sigma: 0.5,
            bound: 10.0,
            target_minima: 15,
            validation_fraction: 0.2,
            state_policy: StatePolicy::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.init_sigma > 0.0 && self.init_sigma.is_finite()) {
            return Err(TrainError::InvalidConfig("init_sigma must be > 0".into()));
        }
        check_bound(self.bound)?;
        check_fraction(self.validation_fraction)?;
        if self.target_minima == 0 {
            return Err(TrainError::InvalidConfig(
                "target_minima must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn check_bound(bound: f64) -> Result<(), TrainError> {
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(TrainError::InvalidConfig("bound must be > 0".into()));
    }
    Ok(())
}

pub(crate) fn check_fraction(f: f64) -> Result<(), TrainError> {
    if !(f > 0.0 && f < 1.0) {
        return Err(TrainError::InvalidConfig(
            "validation_fraction must lie in (0, 1)".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingProvenance {
    pub method: Trainer,
    pub config_digest: String,
    pub seed: u64,
    pub minima_count: usize,
    pub validation_accuracy: f64,
    pub bound: f64,
    /// Residual-map evaluations spent (forward passes, with or without the
    /// backward pass).
    pub evaluations: u64,
}

/// Trained network parameters with selection results and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedModel {
    pub schema_version: u32,
    pub shape: NetworkShape,
    pub x: Vec<f64>,
    pub state_policy: StatePolicy,
    pub feature_config_digest: String,
    pub selected_minimum_cost: f64,
    pub validation_accuracy: f64,
    pub training: TrainingProvenance,
}

impl TrainedModel {
    pub fn parameters(&self) -> Result<Parameters, NetworkError> {
        Parameters::unflatten(&self.x, self.shape)
    }

    pub fn document(&self) -> ParametersDocument {
        ParametersDocument {
            schema_version: self.schema_version,
            shape: self.shape,
            x: self.x.clone(),
            state_policy: self.state_policy.clone(),
            feature_config_digest: self.feature_config_digest.clone(),
        }
    }

    /// Output vectors at the final step of each sample.
    pub fn outputs(&self, samples: &[SequenceSample]) -> Result<Vec<Vec<f64>>, NetworkError> {
        let map = NetworkResiduals::new(self.shape, samples.to_vec(), &self.state_policy)?;
        let flat = map.outputs(&self.x);
        Ok(flat.chunks(self.shape.q).map(|c| c.to_vec()).collect())
    }

    /// Fraction of samples whose output argmax matches the target argmax.
    pub fn accuracy(&self, samples: &[SequenceSample]) -> Result<f64, NetworkError> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let outs = self.outputs(samples)?;
        let hits = outs
            .iter()
            .zip(samples)
            .filter(|(o, s)| argmax(o) == s.target_class())
            .count();
        Ok(hits as f64 / samples.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

pub(crate) struct ModelParts<'a> {
    pub shape: NetworkShape,
    pub x: Vec<f64>,
    pub policy: &'a StatePolicy,
    pub cost: f64,
    pub validation_accuracy: f64,
    pub method: Trainer,
    pub config_digest: String,
    pub seed: u64,
    pub minima_count: usize,
    pub bound: f64,
    pub evaluations: u64,
}

pub(crate) fn assemble(p: ModelParts<'_>) -> TrainedModel {
    TrainedModel {
        schema_version: PARAMETERS_SCHEMA_VERSION,
        shape: p.shape,
        x: p.x,
        state_policy: p.policy.clone(),
        feature_config_digest: String::new(),
        selected_minimum_cost: p.cost,
        validation_accuracy: p.validation_accuracy,
        training: TrainingProvenance {
            method: p.method,
            config_digest: p.config_digest,
            seed: p.seed,
            minima_count: p.minima_count,
            validation_accuracy: p.validation_accuracy,
            bound: p.bound,
            evaluations: p.evaluations,
        },
    }
}

/// Fit/validation partition of a training set.
#[derive(Debug, Clone)]
pub struct Split {
    pub fit: Vec<SequenceSample>,
    pub validation: Vec<SequenceSample>,
    /// True when no class was large enough to hold anything out, in which
    /// case `validation` equals `fit`.
    pub validation_is_fit: bool,
}

/// Holds out `floor(fraction · count)` samples of every class, chosen by a
/// seeded shuffle; both parts keep the original sample order.
pub fn stratified_split(
    samples: &[SequenceSample],
    fraction: f64,
    seed: u64,
) -> Result<Split, TrainError> {
    check_fraction(fraction)?;
    let q = samples.first().map_or(0, |s| s.target.len());
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); q];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.target_class()].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut held = vec![false; samples.len()];
    let mut starved = None;
    let mut any = false;
    for (class, idx) in by_class.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let k = (fraction * idx.len() as f64).floor() as usize;
        if k == 0 {
            starved.get_or_insert(class);
            continue;
        }
        any = true;
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..k] {
            held[i] = true;
        }
    }
    if !any {
        return Ok(Split {
            fit: samples.to_vec(),
            validation: samples.to_vec(),
            validation_is_fit: true,
        });
    }
    if let Some(class) = starved {
        return Err(TrainError::DegenerateSplit { class });
    }
    let (mut fit, mut validation) = (Vec::new(), Vec::new());
    for (s, h) in samples.iter().zip(held) {
        if h {
            validation.push(s.clone());
        } else {
            fit.push(s.clone());
        }
    }
    Ok(Split {
        fit,
        validation,
        validation_is_fit: false,
    })
}

pub(crate) fn class_count(samples: &[SequenceSample]) -> usize {
    let mut seen: Vec<usize> = samples.iter().map(|s| s.target_class()).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

pub(crate) fn check_samples(
    shape: NetworkShape,
    samples: &[SequenceSample],
) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::InvalidConfig("no training samples".into()));
    }
    crate::network::forward_checks(shape, samples)?;
    if class_count(samples) < 2 {
        return Err(TrainError::TooFewClasses);
    }
    Ok(())
}

/// Rows `x_i − B` then `−x_i − B` for every parameter.
struct BoundRows {
    n: usize,
    bound: f64,
}

impl ResidualMap for BoundRows {
    fn input_dim(&self) -> usize {
        self.n
    }

    fn output_dim(&self) -> usize {
        2 * self.n
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (i, xi) in x.iter().enumerate() {
            out[i] = xi - self.bound;
            out[self.n + i] = -xi - self.bound;
        }
    }

    fn jacobian(&self, _x: &[f64], jac: &mut DMatrix<f64>) {
        jac.fill(0.0);
        for i in 0..self.n {
            jac[(i, i)] = 1.0;
            jac[(self.n + i, i)] = -1.0;
        }
    }

    fn vjp(&self, _x: &[f64], w: &[f64], grad: &mut [f64]) {
        for (i, g) in grad.iter_mut().enumerate() {
            *g = w[i] - w[self.n + i];
        }
    }
}

/// Counts residual evaluations of the wrapped network map.
struct Counted {
    inner: NetworkResiduals,
    count: Arc<AtomicU64>,
}

impl ResidualMap for Counted {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(x, out)
    }

    fn jacobian(&self, x: &[f64], jac: &mut DMatrix<f64>) {
        self.inner.jacobian(x, jac)
    }

    fn vjp(&self, x: &[f64], w: &[f64], grad: &mut [f64]) {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.vjp(x, w, grad)
    }

    fn residual_and_gradient(&self, x: &[f64], h: &mut [f64], grad: &mut [f64]) {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.residual_and_gradient(x, h, grad)
    }
}

fn build_counted(
    shape: NetworkShape,
    samples: &[SequenceSample],
    policy: &StatePolicy,
    bound: f64,
) -> Result<(ConstraintSystem, Arc<AtomicU64>), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::InvalidConfig("no training samples".into()));
    }
    check_bound(bound)?;
    let count = Arc::new(AtomicU64::new(0));
    let net = Counted {
        inner: NetworkResiduals::new(shape, samples.to_vec(), policy)?,
        count: count.clone(),
    };
    let bounds = BoundRows {
        n: shape.param_count(),
        bound,
    };
    let sys = add_slack(Some(Arc::new(bounds)), Some(Arc::new(net)))?;
    Ok((sys, count))
}

/// Training problem over `(x, s)`: inequality rows `±x_i − B + s²` followed
/// by the network residuals. `dim_x = 3·n_p`, `dim_h = 2·n_p + q·N`.
pub fn build_training_system(
    shape: NetworkShape,
    samples: &[SequenceSample],
    policy: &StatePolicy,
    config: &TrainConfig,
) -> Result<ConstraintSystem, TrainError> {
    Ok(build_counted(shape, samples, policy, config.bound)?.0)
}

pub(crate) fn normal_init(n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn clamp_all(x: &mut [f64], bound: f64) {
    x.iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
}

pub(crate) fn accuracy_of(
    shape: NetworkShape,
    x: &[f64],
    samples: &[SequenceSample],
    policy: &StatePolicy,
) -> Result<f64, NetworkError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let map = NetworkResiduals::new(shape, samples.to_vec(), policy)?;
    let out = map.outputs(x);
    let hits = out
        .chunks(shape.q)
        .zip(samples)
        .filter(|(o, s)| argmax(o) == s.target_class())
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Serialize)]
struct QgsDigestInput<'a> {
    config: &'a TrainConfig,
    settings: &'a QgsSettings,
}

/// Trains by QGS minima enumeration and keeps the minimum with the best
/// held-out accuracy (then lower cost, then discovery order).
pub fn train_qgs(
    samples: &[SequenceSample],
    shape: NetworkShape,
    config: &TrainConfig,
    settings: &QgsSettings,
) -> Result<(TrainedModel, MinimaSet), TrainError> {
    train_qgs_from(samples, shape, config, settings, None)
}

/// [`train_qgs`] starting from given network parameters instead of a random
/// draw.
pub fn train_qgs_from(
    samples: &[SequenceSample],
    shape: NetworkShape,
    config: &TrainConfig,
    settings: &QgsSettings,
    warm_start: Option<&[f64]>,
) -> Result<(TrainedModel, MinimaSet), TrainError> {
    config.validate()?;
    check_samples(shape, samples)?;
    let settings = QgsSettings {
        target_minima: config.target_minima,
        seed: config.seed,
        ..settings.clone()
    };
    settings.validate()?;
    let split = stratified_split(samples, config.validation_fraction, config.seed)?;
    let (sys, count) = build_counted(shape, &split.fit, &config.state_policy, config.bound)?;

    let np = shape.param_count();
    let mut x0 = match warm_start {
        Some(w) => {
            crate::network::check_param_len(np, w.len())?;
            w.to_vec()
        }
        None => normal_init(np, config.init_sigma, &mut init_rng(config.seed)),
    };
    x0.extend(std::iter::repeat_n(config.bound.sqrt(), 2 * np));

    let minima = enumerate_minima(&sys, &x0, &settings)?;
    let scored: Vec<(Vec<f64>, f64)> = minima
        .items
        .par_iter()
        .map(|eq| {
            let mut x = eq.point[..np].to_vec();
            clamp_all(&mut x, config.bound);
            let acc = accuracy_of(shape, &x, &split.validation, &config.state_policy)?;
            Ok((x, acc))
        })
        .collect::<Result<_, NetworkError>>()?;
    // Items are sorted by cost with discovery order kept among ties, so the
    // first maximum of accuracy honors the full tie-break rule.
    let mut best = 0;
    for (i, (_, acc)) in scored.iter().enumerate() {
        if *acc > scored[best].1 {
            best = i;
        }
    }
    let (x, acc) = scored[best].clone();
    let model = assemble(ModelParts {
        shape,
        x,
        policy: &config.state_policy,
        cost: minima.items[best].cost,
        validation_accuracy: acc,
        method: Trainer::Qgs,
        config_digest: json_digest(&QgsDigestInput {
            config,
            settings: &settings,
        }),
        seed: config.seed,
        minima_count: minima.items.len(),
        bound: config.bound,
        evaluations: count.load(Ordering::Relaxed),
    });
    Ok((model, minima))
}

/// Validation accuracy of every member of a minima set, in set order.
pub fn minima_accuracies(
    minima: &MinimaSet,
    shape: NetworkShape,
    samples: &[SequenceSample],
    config: &TrainConfig,
) -> Result<Vec<f64>, TrainError> {
    let split = stratified_split(samples, config.validation_fraction, config.seed)?;
    let np = shape.param_count();
    minima
        .items
        .iter()
        .map(|eq| {
            let mut x = eq.point[..np].to_vec();
            clamp_all(&mut x, config.bound);
            Ok(accuracy_of(
                shape,
                &x,
                &split.validation,
                &config.state_policy,
            )?)
        })
        .collect()
}

/// XOR problem used to sanity-check the trainers.
pub mod fixtures {
    use super::*;

    /// Tight integration tolerances keep the explicit integrator from
    /// stalling the gradient above `grad_tol` on this small problem.
    pub fn xor_qgs_settings() -> QgsSettings {
        QgsSettings {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            grad_tol: 1e-5,
            max_time: 1e4,
            max_steps: 20_000,
            escape_eps: 1.0,
            backward_horizon: 0.5,
            ..Default::default()
        }
    }

    pub fn xor() -> Vec<SequenceSample> {
        [(0.0, 0.0, 0), (0.0, 1.0, 1), (1.0, 0.0, 1), (1.0, 1.0, 0)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b, c))| SequenceSample::one_hot(vec![a, b], c, 2, format!("xor{i}")))
            .collect()
    }
}
