use serde::{Deserialize, Serialize};

use super::{
    derive_seed, evaluate, train_two_stage_from, ClassifyError, ConfusionMatrix, TwoStageConfig,
    TwoStageModel,
};
use crate::datagen::FeatureVector;

/// Reference accuracy of the boosting scenario, for annotation only.
pub const BOOSTING_REFERENCE: f64 = 0.9644;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostRound {
    pub round: usize,
    pub batch_size: usize,
    pub batch_accuracy: f64,
    pub misclassified: usize,
    /// Training-set size after appending this round's misclassified events.
    pub train_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostReport {
    pub initial_accuracy: f64,
    pub rounds: Vec<BoostRound>,
    pub final_accuracy: f64,
    pub final_confusion: ConfusionMatrix,
    pub reference_accuracy: f64,
}

/// Splits `events` into `rounds` evaluation batches plus a held-out final
/// batch, dealing each class's events round-robin so every batch keeps the
/// class balance.
pub fn boost_batches(
    events: &[FeatureVector],
    rounds: usize,
) -> (Vec<Vec<FeatureVector>>, Vec<FeatureVector>) {
    let parts = rounds + 1;
    let mut batches = vec![Vec::new(); parts];
    let mut seen = [0usize; crate::datagen::CLASS_COUNT];
    for f in events {
        let k = &mut seen[f.class.index()];
        batches[*k % parts].push(f.clone());
        *k += 1;
    }
    let held_out = batches.pop().expect("at least one part");
    (batches, held_out)
}

/// Runs `batches.len()` boosting rounds. Each round evaluates the current
/// model on a fresh batch, appends the misclassified events to the training
/// set and retrains both stages from the current parameters; a round
/// without errors keeps the model as is. The final
/// model is scored on `held_out`, which no round touches.
pub fn boost(
    model: &TwoStageModel,
    train: &[FeatureVector],
    batches: &[Vec<FeatureVector>],
    held_out: &[FeatureVector],
    config: &TwoStageConfig,
) -> Result<(TwoStageModel, BoostReport), ClassifyError> {
    if batches.is_empty() {
        return Err(ClassifyError::InvalidConfig(
            "boosting needs at least one round".into(),
        ));
    }
    let digest = model.feature_config_digest.clone();
    let (initial_accuracy, _) = evaluate(model, held_out)?;
    let mut current = model.clone();
    let mut train = train.to_vec();
    let mut rounds = Vec::with_capacity(batches.len());
    for (r, batch) in batches.iter().enumerate() {
        let predicted = current.predict_batch(batch)?;
        let wrong: Vec<FeatureVector> = batch
            .iter()
            .zip(&predicted)
            .filter(|(f, p)| f.class != **p)
            .map(|(f, _)| f.clone())
            .collect();
        let batch_accuracy = if batch.is_empty() {
            0.0
        } else {
            1.0 - wrong.len() as f64 / batch.len() as f64
        };
        let misclassified = wrong.len();
        if misclassified > 0 {
            train.extend(wrong);
            let round_config = TwoStageConfig {
                seed: derive_seed(config.seed, 100 + r as u64),
                ..config.clone()
            };
            current = train_two_stage_from(&train, &round_config, &digest, Some(&current))?.model;
        }
        rounds.push(BoostRound {
            round: r + 1,
            batch_size: batch.len(),
            batch_accuracy,
            misclassified,
            train_size: train.len(),
        });
    }
    let (final_accuracy, final_confusion) = evaluate(&current, held_out)?;
    Ok((
        current,
        BoostReport {
            initial_accuracy,
            rounds,
            final_accuracy,
            final_confusion,
            reference_accuracy: BOOSTING_REFERENCE,
        },
    ))
}
