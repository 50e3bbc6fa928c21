use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    accuracy_of, assemble, check_bound, check_fraction, check_samples, init_rng, normal_init,
    stratified_split, ModelParts, TrainError, TrainedModel, Trainer,
};
use crate::digest::json_digest;
use crate::network::{
    check_param_len, NetworkResiduals, NetworkShape, SequenceSample, StatePolicy,
};
use crate::qgs::ResidualMap;

/// Real-coded genetic algorithm over flattened parameter vectors.
///
/// Selection is roulette on rank-scaled fitness (weight `1/√rank`),
/// crossover draws each gene from one of two parents under a uniform mask,
/// and mutation adds Gaussian noise whose scale decays linearly to
/// `mutation_scale · (1 − mutation_shrink)` at the last generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    /// Desk-scale default; the reference study used 10000.
    pub population_size: usize,
    pub generations: usize,
    pub elitism: usize,
    /// Share of non-elite children produced by crossover; the rest mutate.
    pub crossover_fraction: f64,
    pub mutation_scale: f64,
    pub mutation_shrink: f64,
    pub init_sigma: f64,
    pub bound: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 200,
            generations: 100,
            elitism: 2,
            crossover_fraction: 0.8,
            mutation_scale: 0.5,
            mutation_shrink: 1.0,
            init_sigma: 0.5,
            bound: 10.0,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.population_size < 4 {
            return bad("population_size must be ≥ 4");
        }
        if self.generations == 0 {
            return bad("generations must be ≥ 1");
        }
        if self.elitism >= self.population_size {
            return bad("elitism must be below population_size");
        }
        if !(0.0..=1.0).contains(&self.crossover_fraction) {
            return bad("crossover_fraction must lie in [0, 1]");
        }
        if !(self.mutation_scale >= 0.0 && self.mutation_scale.is_finite()) {
            return bad("mutation_scale must be ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.mutation_shrink) {
            return bad("mutation_shrink must lie in [0, 1]");
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return bad("init_sigma must be ≥ 0");
        }
        check_bound(self.bound)?;
        check_fraction(self.validation_fraction)
    }
}

#[derive(Debug, Clone)]
pub struct GaOutcome {
    pub model: TrainedModel,
    /// Best fit-set sse of the population at every generation, starting with
    /// the initial population.
    pub best_sse: Vec<f64>,
}

pub fn train_ga(
    samples: &[SequenceSample],
    shape: NetworkShape,
    config: &GaConfig,
    policy: &StatePolicy,
) -> Result<TrainedModel, TrainError> {
    Ok(train_ga_with_history(samples, shape, config, policy, None)?.model)
}

fn sse(map: &NetworkResiduals, x: &[f64], h: &mut [f64]) -> f64 {
    map.eval(x, h);
    let s: f64 = h.iter().map(|v| v * v).sum();
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

fn roulette<R: Rng>(cumulative: &[f64], rng: &mut R) -> usize {
    let total = *cumulative.last().expect("non-empty");
    let r = rng.random::<f64>() * total;
    cumulative
        .partition_point(|c| *c <= r)
        .min(cumulative.len() - 1)
}

/// Runs the GA. With `seed_individual` every initial member is that vector
/// plus `init_sigma` noise.
pub fn train_ga_with_history(
    samples: &[SequenceSample],
    shape: NetworkShape,
    config: &GaConfig,
    policy: &StatePolicy,
    seed_individual: Option<&[f64]>,
) -> Result<GaOutcome, TrainError> {
    config.validate()?;
    check_samples(shape, samples)?;
    let split = stratified_split(samples, config.validation_fraction, config.seed)?;
    let map = NetworkResiduals::new(shape, split.fit.clone(), policy)?;
    let np = shape.param_count();
    if let Some(s) = seed_individual {
        check_param_len(np, s.len())?;
    }
    let mut rng = init_rng(config.seed);
    rng.set_stream(2);
    let pop_n = config.population_size;
    let mut pop: Vec<Vec<f64>> = (0..pop_n)
        .map(|_| {
            let mut x = normal_init(np, config.init_sigma, &mut rng);
            if let Some(s) = seed_individual {
                x.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
            x.iter_mut()
                .for_each(|v| *v = v.clamp(-config.bound, config.bound));
            x
        })
        .collect();

    let evaluate = |pop: &[Vec<f64>]| -> Vec<f64> {
        pop.par_iter()
            .map_init(|| vec![0.0; map.output_dim()], |h, x| sse(&map, x, h))
            .collect()
    };
    let ranked = |fit: &[f64]| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..fit.len()).collect();
        idx.sort_by(|a, b| fit[*a].total_cmp(&fit[*b]));
        idx
    };

    let mut fitness = evaluate(&pop);
    let mut best_sse = Vec::with_capacity(config.generations + 1);
    let n_cross = ((pop_n - config.elitism) as f64 * config.crossover_fraction).round() as usize;
    let weights: Vec<f64> = (1..=pop_n).map(|r| 1.0 / (r as f64).sqrt()).collect();
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();

    for gen in 0..config.generations {
        let order = ranked(&fitness);
        best_sse.push(fitness[order[0]]);
        let scale = config.mutation_scale
            * (1.0 - config.mutation_shrink * gen as f64 / config.generations as f64);
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(pop_n);
        for &e in order.iter().take(config.elitism) {
            next.push(pop[e].clone());
        }
        for _ in 0..n_cross {
            let a = &pop[order[roulette(&cumulative, &mut rng)]];
            let b = &pop[order[roulette(&cumulative, &mut rng)]];
            next.push(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| if rng.random::<bool>() { *x } else { *y })
                    .collect(),
            );
        }
        while next.len() < pop_n {
            let parent = &pop[order[roulette(&cumulative, &mut rng)]];
            next.push(
                parent
                    .iter()
                    .map(|v| {
                        let z: f64 = rng.sample(StandardNormal);
                        (v + scale * z).clamp(-config.bound, config.bound)
                    })
                    .collect(),
            );
        }
        pop = next;
        fitness = evaluate(&pop);
    }
    let order = ranked(&fitness);
    best_sse.push(fitness[order[0]]);

    // Final pick: highest validation accuracy, then lower sse.
    let accs: Vec<f64> = pop
        .par_iter()
        .map(|x| accuracy_of(shape, x, &split.validation, policy))
        .collect::<Result<_, _>>()?;
    let mut pick = order[0];
    for &i in &order {
        if accs[i] > accs[pick] {
            pick = i;
        }
    }
    let model = assemble(ModelParts {
        shape,
        x: pop[pick].clone(),
        policy,
        cost: 0.5 * fitness[pick],
        validation_accuracy: accs[pick],
        method: Trainer::Ga,
        config_digest: json_digest(config),
        seed: config.seed,
        minima_count: 1,
        bound: config.bound,
        evaluations: (pop_n * (config.generations + 1)) as u64,
    });
    Ok(GaOutcome { model, best_sse })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::xor;
    use super::*;

    #[test]
    fn identical_population_without_mutation_is_static() {
        let shape = NetworkShape::new(2, 3, 2).unwrap();
        let seed = normal_init(shape.param_count(), 0.5, &mut init_rng(1));
        let cfg = GaConfig {
            population_size: 8,
            generations: 10,
            mutation_scale: 0.0,
            init_sigma: 0.0,
            ..Default::default()
        };
        let out = train_ga_with_history(&xor(), shape, &cfg, &StatePolicy::default(), Some(&seed))
            .unwrap();
        assert!(out.best_sse.iter().all(|v| *v == out.best_sse[0]));
        assert_eq!(out.model.x, seed);
    }

    #[test]
    fn elitism_keeps_best_sse_non_increasing() {
        let shape = NetworkShape::new(2, 3, 2).unwrap();
        let cfg = GaConfig {
            population_size: 30,
            generations: 40,
            elitism: 1,
            seed: 5,
            ..Default::default()
        };
        let out =
            train_ga_with_history(&xor(), shape, &cfg, &StatePolicy::default(), None).unwrap();
        assert!(out.best_sse.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.model.x.iter().all(|v| v.abs() <= cfg.bound + 1e-9));
    }

    #[test]
    fn xor_solved_for_some_seed() {
        let shape = NetworkShape::new(2, 4, 2).unwrap();
        let solved: Vec<u64> = (0..5)
            .filter(|&seed| {
                let cfg = GaConfig {
                    generations: 300,
                    seed,
                    ..Default::default()
                };
                let m = train_ga(&xor(), shape, &cfg, &StatePolicy::default()).unwrap();
                m.accuracy(&xor()).unwrap() == 1.0
            })
            .collect();
        assert!(!solved.is_empty());
    }

    #[test]
    fn rejects_tiny_population() {
        let cfg = GaConfig {
            population_size: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reproducible() {
        let shape = NetworkShape::new(2, 3, 2).unwrap();
        let cfg = GaConfig {
            population_size: 20,
            generations: 15,
            seed: 2,
            ..Default::default()
        };
        let a = train_ga(&xor(), shape, &cfg, &StatePolicy::default()).unwrap();
        let b = train_ga(&xor(), shape, &cfg, &StatePolicy::default()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }
}
