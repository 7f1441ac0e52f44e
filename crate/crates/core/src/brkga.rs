//! Biased random-key genetic algorithm: the parameterized solver whose
//! five-dimensional configuration space the portfolio draws from.
//!
//! Individuals are real-valued key vectors in [0, 1]^d decoded to bit
//! strings by thresholding at 0.5. Each generation carries the elite over
//! unchanged, mates an elite parent with a non-elite parent under a biased
//! coin, and injects fresh random mutants.

use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{BitString, ProblemInstance};
use crate::seeds;

/// One BRKGA configuration; a point in the configuration space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    pub elite_size: u32,
    pub offspring_size: u32,
    pub mutant_size: u32,
    pub elite_bias: f64,
    pub eliminate_duplicates: bool,
}

/// Inclusive parameter ranges of the configuration space.
pub mod ranges {
    pub const ELITE: (u32, u32) = (1, 400);
    pub const OFFSPRING: (u32, u32) = (1, 1000);
    pub const MUTANT: (u32, u32) = (1, 200);
    pub const ELITE_BIAS: (f64, f64) = (0.0, 1.0);
}

impl SolverConfig {
    pub fn new(
        elite_size: u32,
        offspring_size: u32,
        mutant_size: u32,
        elite_bias: f64,
        eliminate_duplicates: bool,
    ) -> Result<Self> {
        let cfg = Self {
            elite_size,
            offspring_size,
            mutant_size,
            elite_bias,
            eliminate_duplicates,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: u32, (lo, hi): (u32, u32)| v >= lo && v <= hi;
        if !in_range(self.elite_size, ranges::ELITE)
            || !in_range(self.offspring_size, ranges::OFFSPRING)
            || !in_range(self.mutant_size, ranges::MUTANT)
            || !(ranges::ELITE_BIAS.0..=ranges::ELITE_BIAS.1).contains(&self.elite_bias)
            || !self.elite_bias.is_finite()
        {
            return Err(Error::Config(format!(
                "configuration out of range: {self:?}"
            )));
        }
        Ok(())
    }

    /// Individuals per generation.
    pub fn population_total(&self) -> usize {
        (self.elite_size + self.offspring_size + self.mutant_size) as usize
    }

    /// Stable value-identity string used as a cache key.
    pub fn value_key(&self) -> String {
        format!(
            "e{}-o{}-m{}-b{:016x}-{}",
            self.elite_size,
            self.offspring_size,
            self.mutant_size,
            self.elite_bias.to_bits(),
            if self.eliminate_duplicates { "T" } else { "F" }
        )
    }
}

impl PartialEq for SolverConfig {
    fn eq(&self, other: &Self) -> bool {
        self.elite_size == other.elite_size
            && self.offspring_size == other.offspring_size
            && self.mutant_size == other.mutant_size
            && self.elite_bias.to_bits() == other.elite_bias.to_bits()
            && self.eliminate_duplicates == other.eliminate_duplicates
    }
}

impl Eq for SolverConfig {}

impl Hash for SolverConfig {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.elite_size.hash(state);
        self.offspring_size.hash(state);
        self.mutant_size.hash(state);
        self.elite_bias.to_bits().hash(state);
        self.eliminate_duplicates.hash(state);
    }
}

/// Uniform sample over the configuration space.
pub fn sample_config<R: Rng + ?Sized>(rng: &mut R) -> SolverConfig {
    SolverConfig {
        elite_size: rng.random_range(ranges::ELITE.0..=ranges::ELITE.1),
        offspring_size: rng.random_range(ranges::OFFSPRING.0..=ranges::OFFSPRING.1),
        mutant_size: rng.random_range(ranges::MUTANT.0..=ranges::MUTANT.1),
        elite_bias: rng.random_range(ranges::ELITE_BIAS.0..=ranges::ELITE_BIAS.1),
        eliminate_duplicates: rng.random_bool(0.5),
    }
}

/// Decode random keys to bits: bit i is 1 iff key_i >= 0.5.
pub fn decode_keys(keys: &[f64]) -> Result<BitString> {
    for &k in keys {
        if !(0.0..=1.0).contains(&k) {
            return Err(Error::KeyOutOfRange(k));
        }
    }
    BitString::from_bits(keys.iter().map(|&k| u8::from(k >= 0.5)).collect())
}

/// Outcome of one solver run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub best_x: BitString,
    pub best_y: f64,
    pub evals_used: usize,
}

/// Run BRKGA on an instance under an evaluation budget with a fixed seed.
pub fn brkga_run(
    config: &SolverConfig,
    instance: &dyn ProblemInstance,
    budget: usize,
    seed: u64,
) -> Result<RunResult> {
    brkga_run_observed(config, instance, budget, seed, |_, _| {})
}

/// Like [`brkga_run`] but invoking `observer` for every objective
/// evaluation in order; used to harvest search trajectories.
pub fn brkga_run_observed(
    config: &SolverConfig,
    instance: &dyn ProblemInstance,
    budget: usize,
    seed: u64,
    mut observer: impl FnMut(&BitString, f64),
) -> Result<RunResult> {
    config.validate()?;
    let dim = instance.dimension();
    let pop_total = config.population_total();
    if budget < pop_total {
        return Err(Error::BudgetTooSmall {
            budget,
            generation: pop_total,
        });
    }
    let mut rng = seeds::rng_from(seed);
    let random_keys = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| rng.random::<f64>()).collect()
    };

    let mut keys: Vec<Vec<f64>> = (0..pop_total).map(|_| random_keys(&mut rng)).collect();
    let mut fitness = evaluate_all(instance, &keys, &mut observer)?;
    let mut evals = pop_total;

    let mut best_idx = argmax(&fitness);
    let mut best_x = decode_keys(&keys[best_idx])?;
    let mut best_y = fitness[best_idx];

    let per_generation = (config.offspring_size + config.mutant_size) as usize;
    while evals + per_generation <= budget {
        // Rank survivors: fitness descending, index ascending on ties.
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by(|&a, &b| {
            fitness[b]
                .partial_cmp(&fitness[a])
                .expect("finite fitness")
                .then(a.cmp(&b))
        });
        let survivors: Vec<usize> = if config.eliminate_duplicates {
            // Duplicates are individuals sharing a fitness value.
            let mut seen = std::collections::HashSet::new();
            order
                .into_iter()
                .filter(|&i| seen.insert(fitness[i].to_bits()))
                .collect()
        } else {
            order
        };
        let n_elite = (config.elite_size as usize).min(survivors.len());
        let elites = &survivors[..n_elite];
        let non_elites = &survivors[n_elite..];

        let mut next_keys: Vec<Vec<f64>> = elites.iter().map(|&i| keys[i].clone()).collect();
        let mut next_fitness: Vec<f64> = elites.iter().map(|&i| fitness[i]).collect();

        let mut fresh: Vec<Vec<f64>> = Vec::with_capacity(per_generation);
        for _ in 0..config.offspring_size {
            let elite_parent = &keys[elites[rng.random_range(0..elites.len())]];
            // Degenerate populations fall back to elite-elite mating.
            let other_parent = if non_elites.is_empty() {
                &keys[elites[rng.random_range(0..elites.len())]]
            } else {
                &keys[non_elites[rng.random_range(0..non_elites.len())]]
            };
            let child: Vec<f64> = (0..dim)
                .map(|i| {
                    if rng.random::<f64>() < config.elite_bias {
                        elite_parent[i]
                    } else {
                        other_parent[i]
                    }
                })
                .collect();
            fresh.push(child);
        }
        for _ in 0..config.mutant_size {
            fresh.push(random_keys(&mut rng));
        }

        let fresh_fitness = evaluate_all(instance, &fresh, &mut observer)?;
        evals += fresh.len();
        next_keys.extend(fresh);
        next_fitness.extend(fresh_fitness);

        keys = next_keys;
        fitness = next_fitness;

        best_idx = argmax(&fitness);
        if fitness[best_idx] > best_y {
            best_x = decode_keys(&keys[best_idx])?;
            best_y = fitness[best_idx];
        }
    }

    Ok(RunResult {
        best_x,
        best_y,
        evals_used: evals,
    })
}

fn evaluate_all(
    instance: &dyn ProblemInstance,
    keys: &[Vec<f64>],
    observer: &mut impl FnMut(&BitString, f64),
) -> Result<Vec<f64>> {
    let decoded: Vec<BitString> = keys.iter().map(|k| decode_keys(k)).collect::<Result<_>>()?;
    let values = instance.evaluate_batch(&decoded)?;
    for (x, &y) in decoded.iter().zip(&values) {
        if !y.is_finite() {
            return Err(Error::NonFinite("objective value"));
        }
        observer(x, y);
    }
    Ok(values)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::OneMaxInstance;

    fn onemax(dim: usize, seed: u64) -> OneMaxInstance {
        let mut rng = seeds::rng_from(seed);
        OneMaxInstance::random("om", dim, &mut rng)
    }

    #[test]
    fn decode_thresholds_at_half() {
        assert_eq!(decode_keys(&[0.7, 0.3, 0.5]).unwrap().to_string(), "101");
        assert_eq!(decode_keys(&[0.0; 4]).unwrap().to_string(), "0000");
        assert_eq!(decode_keys(&[1.0; 4]).unwrap().to_string(), "1111");
        assert!(decode_keys(&[1.1]).is_err());
        assert!(decode_keys(&[-0.1]).is_err());
    }

    #[test]
    fn sampled_configs_stay_in_range() {
        let mut rng = seeds::rng_from(4);
        let mut bias_sum = 0.0;
        for _ in 0..10_000 {
            let c = sample_config(&mut rng);
            c.validate().unwrap();
            bias_sum += c.elite_bias;
        }
        let mean = bias_sum / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "elite_bias mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_config(&mut seeds::rng_from(9));
        let b = sample_config(&mut seeds::rng_from(9));
        assert_eq!(a, b);
    }

    #[test]
    fn solves_small_onemax() {
        let inst = onemax(10, 1);
        let cfg = SolverConfig::new(20, 70, 10, 0.7, false).unwrap();
        let result = brkga_run(&cfg, &inst, 800, 42).unwrap();
        assert_eq!(result.best_y, 10.0);
        assert_eq!(inst.evaluate(&result.best_x).unwrap(), result.best_y);
    }

    #[test]
    fn runs_are_deterministic() {
        let inst = onemax(16, 2);
        let cfg = SolverConfig::new(10, 30, 5, 0.6, true).unwrap();
        let a = brkga_run(&cfg, &inst, 300, 7).unwrap();
        let b = brkga_run(&cfg, &inst, 300, 7).unwrap();
        assert_eq!(a.best_x, b.best_x);
        assert_eq!(a.best_y, b.best_y);
        assert_eq!(a.evals_used, b.evals_used);
    }

    #[test]
    fn single_generation_budget_stops_after_initial_population() {
        let inst = onemax(12, 3);
        let cfg = SolverConfig::new(5, 10, 5, 0.7, false).unwrap();
        let result = brkga_run(&cfg, &inst, cfg.population_total(), 11).unwrap();
        assert_eq!(result.evals_used, cfg.population_total());
        // A second generation can only improve on the initial population.
        let longer = brkga_run(&cfg, &inst, cfg.population_total() + 15, 11).unwrap();
        assert!(longer.best_y >= result.best_y);
    }

    #[test]
    fn rejects_budget_below_one_generation() {
        let inst = onemax(8, 4);
        let cfg = SolverConfig::new(5, 10, 5, 0.7, false).unwrap();
        assert!(matches!(
            brkga_run(&cfg, &inst, cfg.population_total() - 1, 0),
            Err(Error::BudgetTooSmall { .. })
        ));
    }

    #[test]
    fn best_so_far_is_non_decreasing_and_within_budget() {
        let inst = onemax(20, 5);
        for seed in 0..5 {
            let cfg = SolverConfig::new(8, 24, 8, 0.65, seed % 2 == 0).unwrap();
            let mut best = f64::NEG_INFINITY;
            let mut count = 0usize;
            let result = brkga_run_observed(&cfg, &inst, 500, seed, |_, y| {
                count += 1;
                if y > best {
                    best = y;
                }
            })
            .unwrap();
            assert_eq!(count, result.evals_used);
            assert!(result.evals_used <= 500);
            assert_eq!(best, result.best_y);
        }
    }

    #[test]
    fn value_key_distinguishes_configs() {
        let a = SolverConfig::new(20, 70, 10, 0.7, false).unwrap();
        let b = SolverConfig::new(20, 70, 10, 0.7, true).unwrap();
        let c = SolverConfig::new(20, 70, 10, 0.7000001, false).unwrap();
        assert_ne!(a.value_key(), b.value_key());
        assert_ne!(a.value_key(), c.value_key());
        assert_eq!(a.value_key(), a.clone().value_key());
    }
}
