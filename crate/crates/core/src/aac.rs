//! Configuration search for one complementary portfolio member: restarted
//! first-improvement hill climbing over the five-parameter space, with
//! every candidate scored by its summed marginal contribution to the
//! partial portfolio over the instance population.

use rand::Rng;
use rayon::prelude::*;

use crate::brkga::{ranges, sample_config, SolverConfig};
use crate::error::{Error, Result};

/// Search budget: total candidate evaluations and independent restarts.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AacBudget {
    pub max_trials: usize,
    pub restarts: usize,
}

impl Default for AacBudget {
    fn default() -> Self {
        Self {
            max_trials: 100,
            restarts: 4,
        }
    }
}

/// Resample one uniformly chosen parameter within its range.
pub fn perturb_config<R: Rng + ?Sized>(config: &SolverConfig, rng: &mut R) -> SolverConfig {
    let mut out = config.clone();
    match rng.random_range(0..5u8) {
        0 => out.elite_size = rng.random_range(ranges::ELITE.0..=ranges::ELITE.1),
        1 => out.offspring_size = rng.random_range(ranges::OFFSPRING.0..=ranges::OFFSPRING.1),
        2 => out.mutant_size = rng.random_range(ranges::MUTANT.0..=ranges::MUTANT.1),
        3 => out.elite_bias = rng.random_range(ranges::ELITE_BIAS.0..=ranges::ELITE_BIAS.1),
        _ => out.eliminate_duplicates = !out.eliminate_duplicates,
    }
    out
}

/// Best configuration found by the search.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub config: SolverConfig,
    pub objective: f64,
    pub trials: usize,
}

/// Find a configuration maximizing `sum_m max(base[m], eval(theta, m))`,
/// where `base[m]` is the partial portfolio's quality on instance `m`
/// (negative infinity rows for an empty portfolio). One trial evaluates a
/// candidate on every instance; per-instance evaluations run concurrently.
pub fn search_configuration(
    base: &[f64],
    budget: &AacBudget,
    eval: &(dyn Fn(&SolverConfig, usize) -> Result<f64> + Sync),
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<SearchOutcome> {
    if budget.max_trials == 0 {
        return Err(Error::Config("search budget has zero trials".into()));
    }
    if base.is_empty() {
        return Err(Error::Config("instance population is empty".into()));
    }
    let restarts = budget.restarts.max(1);
    let per_restart = budget.max_trials.div_ceil(restarts);

    let objective = |cfg: &SolverConfig| -> Result<f64> {
        let values: Vec<f64> = (0..base.len())
            .into_par_iter()
            .map(|m| eval(cfg, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(values.iter().zip(base).map(|(&v, &b)| v.max(b)).sum())
    };

    let mut trials = 0usize;
    let mut incumbent: Option<(SolverConfig, f64)> = None;
    'restarts: for _ in 0..restarts {
        if trials >= budget.max_trials {
            break;
        }
        let mut current = sample_config(rng);
        let mut current_obj = objective(&current)?;
        trials += 1;
        if incumbent
            .as_ref()
            .is_none_or(|(_, best)| current_obj > *best)
        {
            incumbent = Some((current.clone(), current_obj));
        }
        let mut restart_trials = 1usize;
        while restart_trials < per_restart {
            if trials >= budget.max_trials {
                break 'restarts;
            }
            let candidate = perturb_config(&current, rng);
            let cand_obj = objective(&candidate)?;
            trials += 1;
            restart_trials += 1;
            if incumbent.as_ref().is_none_or(|(_, best)| cand_obj > *best) {
                incumbent = Some((candidate.clone(), cand_obj));
            }
            if cand_obj > current_obj {
                current = candidate;
                current_obj = cand_obj;
            }
        }
    }
    let (config, objective) = incumbent.expect("at least one trial ran");
    Ok(SearchOutcome {
        config,
        objective,
        trials,
    })
}
