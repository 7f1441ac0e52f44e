//! Domain-agnostic instance mutation: an evolution strategy over the
//! embedding space that searches for embeddings on which the current
//! portfolio performs poorly.
//!
//! Each step draws N perturbed embeddings around the search mean, mirrors
//! them through the mean, evaluates all 2N samples plus the mean, and
//! updates the mean and per-coordinate standard deviation from the paired
//! fitness differences. The hardest candidate ever seen is tracked
//! throughout, and the operator falls back to the parent embedding when no
//! candidate is strictly harder.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nir::Nir;
use crate::seeds;

/// Strategy hyperparameters: learning rates, initial and minimum spread,
/// and the number of sampled directions per step.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct PgpeParams {
    pub alpha_mu: f64,
    pub alpha_sigma: f64,
    pub sigma_init: f64,
    pub sigma_limit: f64,
    pub directions: usize,
}

impl Default for PgpeParams {
    fn default() -> Self {
        Self {
            alpha_mu: 0.05,
            alpha_sigma: 0.1,
            sigma_init: 1.0,
            sigma_limit: 0.01,
            directions: 8,
        }
    }
}

/// Search-distribution state.
#[derive(Clone, Debug)]
pub struct PgpeState {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub params: PgpeParams,
}

impl PgpeState {
    pub fn new(initial_mean: &[f64], params: PgpeParams) -> Self {
        Self {
            mu: initial_mean.to_vec(),
            sigma: vec![params.sigma_init; initial_mean.len()],
            params,
        }
    }
}

/// Lowest-fitness candidate of one step.
#[derive(Clone, Debug)]
pub struct PgpeStepResult {
    pub best_embedding: Vec<f64>,
    pub best_f: f64,
}

/// One symmetric-sampling step. The 2N+1 fitness evaluations run
/// concurrently; the state update is sequential and deterministic.
pub fn pgpe_step(
    state: &mut PgpeState,
    fitness: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<PgpeStepResult> {
    let dim = state.mu.len();
    let n = state.params.directions;
    let mu = state.mu.clone();
    let sigma = state.sigma.clone();

    let mut candidates: Vec<Vec<f64>> = Vec::with_capacity(2 * n + 1);
    for _ in 0..n {
        let sample: Vec<f64> = (0..dim)
            .map(|j| {
                let eps: f64 = rng.sample(StandardNormal);
                mu[j] + sigma[j] * eps
            })
            .collect();
        candidates.push(sample);
    }
    for i in 0..n {
        let mirrored: Vec<f64> = (0..dim).map(|j| 2.0 * mu[j] - candidates[i][j]).collect();
        candidates.push(mirrored);
    }
    candidates.push(mu.clone());

    let fs: Vec<f64> = candidates
        .par_iter()
        .map(|e| fitness(e))
        .collect::<Result<Vec<_>>>()?;
    if fs.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite("mutation fitness"));
    }
    let f_baseline = fs[2 * n];

    // Mean update from the mirrored fitness differences, spread update from
    // the pair means relative to the baseline. The strategy minimizes the
    // supplied fitness, so the mirrored differences and baselined pair
    // means enter with fitness negated (the update otherwise climbs).
    for j in 0..dim {
        let mut mu_step = 0.0;
        let mut sigma_step = 0.0;
        for i in 0..n {
            let eps_ij = candidates[i][j] - mu[j];
            let f_mirror = -(fs[i] - fs[n + i]);
            let f_spread = -(0.5 * (fs[i] + fs[n + i]) - f_baseline);
            mu_step += eps_ij * f_mirror;
            sigma_step += (eps_ij * eps_ij - sigma[j] * sigma[j]) / sigma[j] * f_spread;
        }
        state.mu[j] = mu[j] + state.params.alpha_mu * mu_step;
        state.sigma[j] =
            (sigma[j] + state.params.alpha_sigma * sigma_step).max(state.params.sigma_limit);
    }

    let mut best = 0;
    for (i, &f) in fs.iter().enumerate() {
        if f < fs[best] {
            best = i;
        }
    }
    Ok(PgpeStepResult {
        best_embedding: candidates[best].clone(),
        best_f: fs[best],
    })
}

/// Result of one mutation call.
#[derive(Clone, Debug)]
pub struct MutationOutcome {
    pub nir: Nir,
    pub f: f64,
    pub reverted: bool,
    pub evaluations: usize,
    /// Hardest fitness after each step; non-increasing.
    pub best_f_trace: Vec<f64>,
}

fn to_f64(e: &[f32]) -> Vec<f64> {
    e.iter().map(|&v| f64::from(v)).collect()
}

fn to_f32(e: &[f64]) -> Vec<f32> {
    e.iter().map(|&v| v as f32).collect()
}

/// Mutate an NIR by searching embedding space for the portfolio's weak
/// spot. `evaluator` measures the portfolio's normalized quality on a
/// candidate NIR (fresh normalization bounds per candidate, no caching);
/// `parent_f` is the parent's recorded quality. Returns the hardest NIR
/// found, or the parent embedding under `child_id` when nothing was
/// strictly harder.
pub fn mutate_instance(
    parent: &Nir,
    parent_f: f64,
    max_iter: usize,
    params: &PgpeParams,
    evaluator: &(dyn Fn(&Nir) -> Result<f64> + Sync),
    child_id: &str,
    seed: u64,
) -> Result<MutationOutcome> {
    let probe_id = format!("{child_id}.probe");
    let mut state = PgpeState::new(&to_f64(&parent.embedding), *params);
    let mut rng = seeds::rng_from(seeds::mix(&[seed, seeds::hash_label("pgpe")]));

    let mut best_embedding = to_f64(&parent.embedding);
    let mut best_f = parent_f;
    let mut evaluations = 0usize;
    let mut trace = Vec::with_capacity(max_iter);

    let fitness = |e: &[f64]| -> Result<f64> {
        let candidate = Nir::new(parent.shared.clone(), to_f32(e), probe_id.clone());
        evaluator(&candidate)
    };

    for _ in 0..max_iter {
        let step = pgpe_step(&mut state, &fitness, &mut rng)?;
        evaluations += 2 * params.directions + 1;
        if step.best_f <= best_f {
            best_f = step.best_f;
            best_embedding = step.best_embedding;
        }
        trace.push(best_f);
    }

    if best_f < parent_f {
        Ok(MutationOutcome {
            nir: Nir::new(parent.shared.clone(), to_f32(&best_embedding), child_id),
            f: best_f,
            reverted: false,
            evaluations,
            best_f_trace: trace,
        })
    } else {
        Ok(MutationOutcome {
            nir: Nir::new(parent.shared.clone(), parent.embedding.clone(), child_id),
            f: parent_f,
            reverted: true,
            evaluations,
            best_f_trace: trace,
        })
    }
}
