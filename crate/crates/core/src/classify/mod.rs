//! Two-stage event classifier, evaluation, boosting and sensitivity sweeps.
//!
//! Stage 1 separates the capacitor and reconfiguration classes from a
//! grouped output `G`; stage 2 resolves the grouped classes.

mod boost;
mod confusion;
mod scaler;
mod sweep;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DatagenError, EventClass, FeatureVector};
use crate::digest::json_digest;
use crate::network::{argmax, NetworkError, NetworkShape, SequenceSample};
use crate::qgs::{MinimaSet, QgsSettings};
use crate::training::{
    train_ebp, train_ga, EbpConfig, GaConfig, TrainConfig, TrainError, TrainedModel, Trainer,
};

pub use boost::{boost, boost_batches, BoostReport, BoostRound, BOOSTING_REFERENCE};
pub use confusion::{format_percent, ConfusionMatrix};
pub use scaler::FeatureScaler;
pub use sweep::{
    grid, run_point, sweep, Annotation, PointSpec, SweepAxis, SweepConfig, SweepPoint, SweepReport,
    SWEEP_SCHEMA_VERSION,
};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("training set has no events of class {0}")]
    MissingClass(u8),
    #[error("empty evaluation set")]
    EmptyEvaluation,
    #[error("feature layout mismatch: model {model}, data {data}")]
    LayoutMismatch { model: String, data: String },
    #[error("{0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Classes resolved by the second stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Classes {
    /// Classes 5–9 (OLTC and load change).
    #[default]
    FiveToNine,
    /// Classes 6–9, with class 5 routed directly by stage 1.
    SixToNine,
}

impl Stage2Classes {
    pub fn classes(self) -> Vec<u8> {
        match self {
            Stage2Classes::FiveToNine => (5..=9).collect(),
            Stage2Classes::SixToNine => (6..=9).collect(),
        }
    }

    /// Classes with their own stage-1 output, ascending; `G` follows them.
    pub fn direct(self) -> Vec<u8> {
        let grouped = self.classes();
        (1..=13).filter(|c| !grouped.contains(c)).collect()
    }
}

/// Numerical preset for QGS training of the classifier networks: loose
/// equilibrium tolerance, a capped step budget and a short reverse-time
/// escape, sized for networks with thousands of parameters.
pub fn classifier_qgs_settings() -> QgsSettings {
    QgsSettings {
        abs_tol: 1e-6,
        rel_tol: 1e-6,
        grad_tol: 2.0,
        max_time: 1e4,
        max_steps: 3000,
        escape_eps: 2.0,
        escape_candidates: 2,
        backward_horizon: 1e-3,
        dedup_dist: 0.5,
        dedup_scale_with_dim: false,
        stability_probe_steps: 20,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoStageConfig {
    pub stage1_hidden: usize,
    pub stage2_hidden: usize,
    pub stage2_classes: Stage2Classes,
    pub trainer: Trainer,
    pub train: TrainConfig,
    pub qgs: QgsSettings,
    /// When set, the QGS equilibrium threshold becomes this value times the
    /// number of training samples of the stage, so the criterion does not
    /// tighten as the data set grows.
    pub grad_tol_per_sample: Option<f64>,
    pub ga: GaConfig,
    pub ebp: EbpConfig,
    /// Drives all trainer seeds; stage `k` uses a seed derived from it.
    pub seed: u64,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            stage1_hidden: 8,
            stage2_hidden: 6,
            stage2_classes: Stage2Classes::default(),
            trainer: Trainer::Qgs,
            train: TrainConfig::default(),
            qgs: classifier_qgs_settings(),
            grad_tol_per_sample: Some(2e-3),
            ga: GaConfig::default(),
            ebp: EbpConfig {
                learning_rate: 0.3,
                ..EbpConfig::default()
            },
            seed: 0,
        }
    }
}

impl TwoStageConfig {
    /// Hidden sizes used for the reporting-rate study.
    pub fn reporting_rate_preset() -> Self {
        Self {
            stage1_hidden: 10,
            stage2_hidden: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.stage1_hidden == 0 || self.stage2_hidden == 0 {
            return Err(ClassifyError::InvalidConfig(
                "hidden sizes must be ≥ 1".into(),
            ));
        }
        self.train.validate()?;
        self.qgs.validate().map_err(TrainError::from)?;
        self.ga.validate()?;
        self.ebp.validate()?;
        Ok(())
    }
}

/// SplitMix64 finalizer; turns one seed into independent per-stage seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStageModel {
    pub schema_version: u32,
    /// Digest of the [`TwoStageConfig`] that produced the model.
    pub config_digest: String,
    pub feature_config_digest: String,
    pub stage2_classes: Stage2Classes,
    pub scaler: FeatureScaler,
    /// Fitted on the stage-2 training events only.
    pub stage2_scaler: FeatureScaler,
    pub stage1: TrainedModel,
    pub stage2: TrainedModel,
}

impl TwoStageModel {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn check_layout(&self, digest: &str) -> Result<(), ClassifyError> {
        if self.feature_config_digest != digest {
            return Err(ClassifyError::LayoutMismatch {
                model: self.feature_config_digest.clone(),
                data: digest.to_string(),
            });
        }
        Ok(())
    }

    fn route(&self, out1: &[f64], out2: impl FnOnce() -> Vec<f64>) -> EventClass {
        let direct = self.stage2_classes.direct();
        let k = argmax(out1);
        let id = if k < direct.len() {
            direct[k]
        } else {
            self.stage2_classes.classes()[argmax(&out2())]
        };
        EventClass::new(id).expect("routing yields a valid class")
    }

    fn stage_outputs(
        model: &TrainedModel,
        scaler: &FeatureScaler,
        features: &[FeatureVector],
    ) -> Result<Vec<Vec<f64>>, ClassifyError> {
        let samples: Vec<SequenceSample> = features
            .iter()
            .map(|f| SequenceSample {
                inputs: vec![scaler.transform(&f.values)],
                target: vec![0.0; model.shape.q],
                id: String::new(),
            })
            .collect();
        Ok(model.outputs(&samples)?)
    }

    /// Predicted class ids for a batch of features.
    pub fn predict_batch(
        &self,
        features: &[FeatureVector],
    ) -> Result<Vec<EventClass>, ClassifyError> {
        if let Some(f) = features
            .iter()
            .find(|f| f.values.len() != self.scaler.dim())
        {
            return Err(ClassifyError::LayoutMismatch {
                model: format!("{} features", self.scaler.dim()),
                data: format!("{} features", f.values.len()),
            });
        }
        let chunks: Vec<Vec<EventClass>> = features
            .par_chunks(256)
            .map(|chunk| {
                let o1 = Self::stage_outputs(&self.stage1, &self.scaler, chunk)?;
                let o2 = Self::stage_outputs(&self.stage2, &self.stage2_scaler, chunk)?;
                Ok(o1
                    .iter()
                    .zip(o2)
                    .map(|(a, b)| self.route(a, || b))
                    .collect())
            })
            .collect::<Result<_, ClassifyError>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

/// Stage-1 argmax picks a direct class, or defers to the stage-2 argmax when
/// it lands on `G`. Ties go to the lowest output index.
pub fn predict(model: &TwoStageModel, f: &FeatureVector) -> Result<EventClass, ClassifyError> {
    Ok(model.predict_batch(std::slice::from_ref(f))?[0])
}

/// Accuracy as correct over total, plus the confusion matrix.
pub fn evaluate(
    model: &TwoStageModel,
    eval: &[FeatureVector],
) -> Result<(f64, ConfusionMatrix), ClassifyError> {
    if eval.is_empty() {
        return Err(ClassifyError::EmptyEvaluation);
    }
    let pred = model.predict_batch(eval)?;
    let m = ConfusionMatrix::from_pairs(eval.iter().map(|f| f.class).zip(pred));
    Ok((m.accuracy(), m))
}

fn stage_samples(
    train: &[FeatureVector],
    scaler: &FeatureScaler,
    labels: &[u8],
    grouped: Option<&[u8]>,
) -> Vec<SequenceSample> {
    let q = labels.len() + usize::from(grouped.is_some());
    train
        .iter()
        .filter_map(|f| {
            let id = f.class.id();
            let idx = match labels.iter().position(|c| *c == id) {
                Some(i) => i,
                None if grouped.is_some_and(|g| g.contains(&id)) => labels.len(),
                None => return None,
            };
            Some(SequenceSample::one_hot(
                scaler.transform(&f.values),
                idx,
                q,
                f.event_id.clone(),
            ))
        })
        .collect()
}

fn train_stage(
    samples: &[SequenceSample],
    shape: NetworkShape,
    config: &TwoStageConfig,
    seed: u64,
    warm_start: Option<&[f64]>,
) -> Result<(TrainedModel, Option<MinimaSet>), ClassifyError> {
    let policy = &config.train.state_policy;
    Ok(match config.trainer {
        Trainer::Qgs => {
            let tc = TrainConfig {
                seed,
                ..config.train.clone()
            };
            let mut settings = config.qgs.clone();
            if let Some(g) = config.grad_tol_per_sample {
                settings.grad_tol = g * samples.len() as f64;
            }
            let (m, s) =
                crate::training::train_qgs_from(samples, shape, &tc, &settings, warm_start)?;
            (m, Some(s))
        }
        Trainer::Ebp => {
            let ec = EbpConfig {
                seed,
                ..config.ebp.clone()
            };
            let m = match warm_start {
                Some(w) => {
                    crate::training::train_ebp_from(samples, shape, &ec, policy, Some(w))?.model
                }
                None => train_ebp(samples, shape, &ec, policy)?,
            };
            (m, None)
        }
        Trainer::Ga => {
            let gc = GaConfig {
                seed,
                ..config.ga.clone()
            };
            let m = match warm_start {
                Some(w) => {
                    crate::training::train_ga_with_history(samples, shape, &gc, policy, Some(w))?
                        .model
                }
                None => train_ga(samples, shape, &gc, policy)?,
            };
            (m, None)
        }
    })
}

/// Trained classifier plus the QGS minima sets of both stages when QGS was
/// the trainer.
#[derive(Debug, Clone)]
pub struct TwoStageTraining {
    pub model: TwoStageModel,
    pub minima: Vec<MinimaSet>,
}

/// Trains both stages on `train`. Stage 1 sees every class with the grouped
/// classes relabelled `G`; stage 2 sees only the grouped classes.
pub fn train_two_stage(
    train: &[FeatureVector],
    config: &TwoStageConfig,
    feature_config_digest: &str,
) -> Result<TwoStageTraining, ClassifyError> {
    train_two_stage_from(train, config, feature_config_digest, None)
}

/// [`train_two_stage`] warm-started from an existing model's parameters.
pub fn train_two_stage_from(
    train: &[FeatureVector],
    config: &TwoStageConfig,
    feature_config_digest: &str,
    warm_start: Option<&TwoStageModel>,
) -> Result<TwoStageTraining, ClassifyError> {
    config.validate()?;
    let grouped = config.stage2_classes.classes();
    for c in EventClass::all() {
        if !train.iter().any(|f| f.class == c) {
            return Err(ClassifyError::MissingClass(c.id()));
        }
    }
    let n = train[0].values.len();
    if train.iter().any(|f| f.values.len() != n) {
        return Err(ClassifyError::InvalidConfig(
            "feature vectors differ in length".into(),
        ));
    }
    if let Some(w) = warm_start {
        w.check_layout(feature_config_digest)?;
    }
    let (scaler, stage2_scaler) = match warm_start {
        Some(w) => (w.scaler.clone(), w.stage2_scaler.clone()),
        None => (
            FeatureScaler::fit(train.iter().map(|f| f.values.as_slice())),
            FeatureScaler::fit(
                train
                    .iter()
                    .filter(|f| grouped.contains(&f.class.id()))
                    .map(|f| f.values.as_slice()),
            ),
        ),
    };
    let direct = config.stage2_classes.direct();
    let s1 = stage_samples(train, &scaler, &direct, Some(&grouped));
    let s2 = stage_samples(train, &stage2_scaler, &grouped, None);
    let shape1 = NetworkShape::new(n, config.stage1_hidden, direct.len() + 1)?;
    let shape2 = NetworkShape::new(n, config.stage2_hidden, grouped.len())?;
    let ws1 = warm_start
        .filter(|w| w.stage1.shape == shape1)
        .map(|w| w.stage1.x.as_slice());
    let ws2 = warm_start
        .filter(|w| w.stage2.shape == shape2)
        .map(|w| w.stage2.x.as_slice());
    let (mut m1, ms1) = train_stage(&s1, shape1, config, derive_seed(config.seed, 1), ws1)?;
    let (mut m2, ms2) = train_stage(&s2, shape2, config, derive_seed(config.seed, 2), ws2)?;
    m1.feature_config_digest = feature_config_digest.to_string();
    m2.feature_config_digest = feature_config_digest.to_string();
    Ok(TwoStageTraining {
        model: TwoStageModel {
            schema_version: MODEL_SCHEMA_VERSION,
            config_digest: json_digest(config),
            feature_config_digest: feature_config_digest.to_string(),
            stage2_classes: config.stage2_classes,
            scaler,
            stage2_scaler,
            stage1: m1,
            stage2: m2,
        },
        minima: ms1.into_iter().chain(ms2).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::FeatureLayout;
    use crate::network::{Parameters, StatePolicy};
    use crate::training::TrainingProvenance;

    fn stub_model(shape: NetworkShape, x: Vec<f64>) -> TrainedModel {
        TrainedModel {
            schema_version: 1,
            shape,
            x,
            state_policy: StatePolicy::default(),
            feature_config_digest: String::new(),
            selected_minimum_cost: 0.0,
            validation_accuracy: 1.0,
            training: TrainingProvenance {
                method: Trainer::Qgs,
                config_digest: String::new(),
                seed: 0,
                minima_count: 1,
                validation_accuracy: 1.0,
                bound: 10.0,
                evaluations: 0,
            },
        }
    }

    /// Identity scaler on one feature; stage outputs follow `V tanh(W u)`
    /// with W = 1 so `u = atanh`-free routing is set by the sign pattern of V.
    fn routed(stage1_col: Vec<f64>, stage2_col: Vec<f64>) -> TwoStageModel {
        let s1 = NetworkShape::new(1, 1, 9).unwrap();
        let s2 = NetworkShape::new(1, 1, 5).unwrap();
        let mut p1 = Parameters::zeros(s1);
        p1.w[(0, 0)] = 1.0;
        p1.v.column_mut(0).copy_from_slice(&stage1_col);
        let identity = FeatureScaler {
            mean: vec![0.0],
            scale: vec![1.0],
        };
        let mut p2 = Parameters::zeros(s2);
        p2.w[(0, 0)] = 1.0;
        p2.v.column_mut(0).copy_from_slice(&stage2_col);
        TwoStageModel {
            schema_version: MODEL_SCHEMA_VERSION,
            config_digest: String::new(),
            feature_config_digest: "d".into(),
            stage2_classes: Stage2Classes::FiveToNine,
            scaler: identity.clone(),
            stage2_scaler: identity,
            stage1: stub_model(s1, p1.flatten()),
            stage2: stub_model(s2, p2.flatten()),
        }
    }

    fn fv(class: u8, value: f64) -> FeatureVector {
        FeatureVector {
            event_id: format!("e{class}"),
            class: EventClass::new(class).unwrap(),
            pmu_count: 1,
            layout: FeatureLayout::default(),
            values: vec![value],
        }
    }

    fn one_hot(n: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        v
    }

    #[test]
    fn direct_route() {
        let m = routed(one_hot(9, 1), one_hot(5, 4));
        assert_eq!(predict(&m, &fv(2, 1.0)).unwrap().id(), 2);
    }

    #[test]
    fn two_hop_route() {
        let m = routed(one_hot(9, 8), one_hot(5, 4));
        assert_eq!(predict(&m, &fv(9, 1.0)).unwrap().id(), 9);
    }

    #[test]
    fn all_equal_outputs_pick_class_one() {
        let m = routed(vec![0.0; 9], vec![0.0; 5]);
        assert_eq!(predict(&m, &fv(3, 1.0)).unwrap().id(), 1);
    }

    #[test]
    fn routing_never_returns_grouped_class_without_g() {
        for k in 0..8 {
            let m = routed(one_hot(9, k), one_hot(5, 2));
            let c = predict(&m, &fv(1, 0.7)).unwrap().id();
            assert!(!(5..=9).contains(&c));
        }
    }

    #[test]
    fn evaluation_conservation() {
        let m = routed(one_hot(9, 8), one_hot(5, 1));
        let eval: Vec<_> = (1..=13)
            .flat_map(|c| (0..3).map(move |_| fv(c, 0.5)))
            .collect();
        let (acc, cm) = evaluate(&m, &eval).unwrap();
        assert_eq!(cm.total(), 39);
        assert!(EventClass::all().all(|c| cm.row_total(c) == 3));
        assert_eq!(acc, cm.trace() as f64 / cm.total() as f64);
        assert_eq!(acc, 3.0 / 39.0);
        assert!(matches!(
            evaluate(&m, &[]),
            Err(ClassifyError::EmptyEvaluation)
        ));
    }

    #[test]
    fn stage_sets() {
        assert_eq!(
            Stage2Classes::FiveToNine.direct(),
            vec![1, 2, 3, 4, 10, 11, 12, 13]
        );
        assert_eq!(
            Stage2Classes::SixToNine.direct(),
            vec![1, 2, 3, 4, 5, 10, 11, 12, 13]
        );
        assert_eq!(TwoStageConfig::default().stage1_hidden, 8);
        let p = TwoStageConfig::reporting_rate_preset();
        assert_eq!((p.stage1_hidden, p.stage2_hidden), (10, 4));
    }

    #[test]
    fn missing_class_rejected() {
        let train: Vec<_> = (1..=13)
            .filter(|c| *c != 7)
            .map(|c| fv(c, c as f64))
            .collect();
        assert!(matches!(
            train_two_stage(&train, &TwoStageConfig::default(), "d"),
            Err(ClassifyError::MissingClass(7))
        ));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_eq!(derive_seed(5, 1), derive_seed(5, 1));
    }
}
