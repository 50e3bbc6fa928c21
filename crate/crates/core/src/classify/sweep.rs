use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train_two_stage, ClassifyError, ConfusionMatrix, TwoStageConfig};
use crate::datagen::{build_dataset, feature_config_digest, ScenarioConfig};
use crate::digest::json_digest;
use crate::training::Trainer;

pub const SWEEP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ReportingRate,
    Noise,
    PmuCount,
    Trainer,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [
        SweepAxis::ReportingRate,
        SweepAxis::Noise,
        SweepAxis::PmuCount,
        SweepAxis::Trainer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::ReportingRate => "reporting_rate",
            SweepAxis::Noise => "noise",
            SweepAxis::PmuCount => "pmu_count",
            SweepAxis::Trainer => "trainer",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
                format!("unknown axis `{s}`; valid axes: {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub scenario: ScenarioConfig,
    pub classifier: TwoStageConfig,
    /// Noise variance used by every point of the trainer axis.
    pub trainer_noise: f64,
    /// On the trainer axis, size the EBP epoch count and the GA generation
    /// count from the network evaluations the QGS point used.
    pub match_budget: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            classifier: TwoStageConfig::default(),
            trainer_noise: 0.05,
            match_budget: true,
        }
    }
}

/// Reference accuracy attached to a sweep setting. Annotation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub setting: String,
    pub reference_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub setting: String,
    pub value: f64,
    pub accuracy: Option<f64>,
    pub runtime_secs: f64,
    pub feature_dim: usize,
    /// Network evaluations spent by both stages.
    pub evaluations: u64,
    pub reference_accuracy: f64,
    pub error: Option<String>,
    pub confusion: Option<ConfusionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub axis: SweepAxis,
    pub config_digest: String,
    pub points: Vec<SweepPoint>,
    pub annotations: Vec<Annotation>,
}

impl SweepReport {
    pub fn succeeded(&self) -> usize {
        self.points.iter().filter(|p| p.accuracy.is_some()).count()
    }

    /// One row per point.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("axis,setting,value,accuracy,runtime_s,feature_dim,evaluations,reference_accuracy,error\n");
        for p in &self.points {
            let err = p.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
            out.push_str(&format!(
                "{},{},{},{},{:.3},{},{},{},\"{}\"\n",
                self.axis,
                p.setting,
                p.value,
                p.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                p.runtime_secs,
                p.feature_dim,
                p.evaluations,
                p.reference_accuracy,
                err
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// One grid point before it runs.
#[derive(Debug, Clone)]
pub struct PointSpec {
    pub setting: String,
    pub value: f64,
    pub scenario: ScenarioConfig,
    pub classifier: TwoStageConfig,
    pub reference_accuracy: f64,
}

/// The fixed grid of an axis. Every point shares the base seeds.
pub fn grid(axis: SweepAxis, config: &SweepConfig) -> Vec<PointSpec> {
    let spec = |setting: String,
                value: f64,
                scenario: ScenarioConfig,
                classifier: TwoStageConfig,
                r: f64| PointSpec {
        setting,
        value,
        scenario,
        classifier,
        reference_accuracy: r,
    };
    let base = &config.scenario;
    let cls = &config.classifier;
    match axis {
        SweepAxis::ReportingRate => [(60u32, 0.96), (120, 0.9666)]
            .into_iter()
            .map(|(rate, r)| {
                let preset = TwoStageConfig::reporting_rate_preset();
                let classifier = TwoStageConfig {
                    stage1_hidden: preset.stage1_hidden,
                    stage2_hidden: preset.stage2_hidden,
                    ..cls.clone()
                };
                let scenario = ScenarioConfig {
                    reporting_rate: rate,
                    ..base.clone()
                };
                spec(format!("{rate}sps"), rate as f64, scenario, classifier, r)
            })
            .collect(),
        SweepAxis::Noise => [
            (0.005, 0.9533),
            (0.01, 0.9311),
            (0.02, 0.9022),
            (0.05, 0.8377),
        ]
        .into_iter()
        .map(|(v, r)| {
            let scenario = ScenarioConfig {
                noise_variance: v,
                ..base.clone()
            };
            spec(format!("sigma2={v}"), v, scenario, cls.clone(), r)
        })
        .collect(),
        SweepAxis::PmuCount => [
            (vec![4u8], 0.6466),
            (vec![3, 4], 0.8311),
            (vec![2, 3, 4], 0.9222),
            (vec![1, 2, 3, 4], 0.96),
        ]
        .into_iter()
        .map(|(pmus, r)| {
            let label = pmus
                .iter()
                .map(|p| format!("PMU{p}"))
                .collect::<Vec<_>>()
                .join("+");
            let count = pmus.len() as f64;
            let scenario = ScenarioConfig {
                active_pmus: pmus,
                ..base.clone()
            };
            spec(label, count, scenario, cls.clone(), r)
        })
        .collect(),
        SweepAxis::Trainer => [
            (Trainer::Qgs, 0.8377),
            (Trainer::Ga, 0.7733),
            (Trainer::Ebp, 0.7044),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, (t, r))| {
            let scenario = ScenarioConfig {
                noise_variance: config.trainer_noise,
                ..base.clone()
            };
            let classifier = TwoStageConfig {
                trainer: t,
                ..cls.clone()
            };
            spec(t.name().to_string(), i as f64, scenario, classifier, r)
        })
        .collect(),
    }
}

/// Generates the data of one point, trains on its training split and scores
/// the evaluation split. Failures land in the point's `error` field.
pub fn run_point(spec: &PointSpec) -> SweepPoint {
    let start = Instant::now();
    let mut point = SweepPoint {
        setting: spec.setting.clone(),
        value: spec.value,
        accuracy: None,
        runtime_secs: 0.0,
        feature_dim: spec.scenario.feature_len(),
        evaluations: 0,
        reference_accuracy: spec.reference_accuracy,
        error: None,
        confusion: None,
    };
    let outcome = (|| -> Result<(f64, ConfusionMatrix, u64), ClassifyError> {
        let ds = build_dataset(&spec.scenario)?;
        let trained = train_two_stage(
            &ds.train,
            &spec.classifier,
            &feature_config_digest(&spec.scenario),
        )?;
        let m = &trained.model;
        let (acc, cm) = evaluate(m, &ds.eval)?;
        Ok((
            acc,
            cm,
            m.stage1.training.evaluations + m.stage2.training.evaluations,
        ))
    })();
    match outcome {
        Ok((acc, cm, evals)) => {
            point.accuracy = Some(acc);
            point.confusion = Some(cm);
            point.evaluations = evals;
        }
        Err(e) => point.error = Some(e.to_string()),
    }
    point.runtime_secs = start.elapsed().as_secs_f64();
    point
}

/// Sizes the EBP and GA budgets of the trainer axis to the network
/// evaluations of the QGS run: an EBP epoch and a GA individual each cost
/// one evaluation, split evenly over the two stages.
fn matched(spec: &PointSpec, qgs_evaluations: u64) -> PointSpec {
    let per_stage = (qgs_evaluations / 2).max(1);
    let mut classifier = spec.classifier.clone();
    match classifier.trainer {
        Trainer::Ebp => classifier.ebp.epochs = per_stage as usize,
        Trainer::Ga => {
            let pop = classifier.ga.population_size as u64;
            classifier.ga.generations = (per_stage / pop).saturating_sub(1).max(1) as usize;
        }
        Trainer::Qgs => {}
    }
    PointSpec {
        classifier,
        ..spec.clone()
    }
}

fn validate(axis: SweepAxis, config: &SweepConfig) -> Result<(), ClassifyError> {
    config.classifier.validate()?;
    for p in grid(axis, config) {
        p.scenario.validate()?;
    }
    Ok(())
}

/// Runs every point of `axis` on a pool of `jobs` worker threads.
pub fn sweep(
    axis: SweepAxis,
    config: &SweepConfig,
    jobs: usize,
) -> Result<SweepReport, ClassifyError> {
    validate(axis, config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ClassifyError::InvalidConfig(e.to_string()))?;
    let specs = grid(axis, config);
    let points = pool.install(|| {
        if axis == SweepAxis::Trainer && config.match_budget {
            let first = run_point(&specs[0]);
            let budget = first.evaluations;
            let rest: Vec<SweepPoint> = specs[1..]
                .par_iter()
                .map(|s| {
                    run_point(&if budget > 0 {
                        matched(s, budget)
                    } else {
                        s.clone()
                    })
                })
                .collect();
            std::iter::once(first).chain(rest).collect()
        } else {
            specs.par_iter().map(run_point).collect::<Vec<_>>()
        }
    });
    let annotations = specs
        .iter()
        .map(|s| Annotation {
            setting: s.setting.clone(),
            reference_accuracy: s.reference_accuracy,
        })
        .collect();
    Ok(SweepReport {
        schema_version: SWEEP_SCHEMA_VERSION,
        axis,
        config_digest: json_digest(&(axis, config)),
        points,
        annotations,
    })
}
