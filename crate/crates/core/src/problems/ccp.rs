use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_dimension, BitString, ProblemInstance};
use crate::error::Result;
use crate::seeds;

/// One pre-drawn Monte Carlo scenario: per-stage contamination and
/// decontamination rates plus the initial contamination level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CcpScenario {
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub z0: f64,
}

/// Contamination control instance over `d` production stages.
///
/// Taking a prevention measure at stage `i` (bit 1) costs `costs[i]` and
/// reduces contamination at rate `gamma`; otherwise contamination grows at
/// rate `alpha`. The chance constraint against the per-stage limit `u` is
/// folded into the objective as the empirical violation frequency over the
/// pre-sampled scenarios, and `lambda` weights an L1 sparsity penalty.
///
/// Scenarios are drawn once at construction and frozen, so the objective is
/// a deterministic function of the solution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CcpInstance {
    id: String,
    pub lambda: f64,
    pub costs: Vec<f64>,
    pub limits: Vec<f64>,
    pub scenarios: Vec<CcpScenario>,
}

/// Inverse-CDF sample from Beta(1, b): F(x) = 1 - (1 - x)^b.
fn beta_1_b<R: Rng + ?Sized>(rng: &mut R, b: f64) -> f64 {
    let u: f64 = rng.random();
    1.0 - (1.0 - u).powf(1.0 / b)
}

impl CcpInstance {
    /// Rates follow Beta(1, 17/3) for alpha, Beta(1, 7/3) for gamma and
    /// Beta(1, 30) for the initial contamination.
    pub const ALPHA_BETA: f64 = 17.0 / 3.0;
    pub const GAMMA_BETA: f64 = 7.0 / 3.0;
    pub const Z0_BETA: f64 = 30.0;

    /// Contamination limit used at every stage.
    pub const DEFAULT_LIMIT: f64 = 0.1;

    /// Lambda values used in the published instance distributions.
    pub const KNOWN_LAMBDAS: [f64; 3] = [0.0, 1e-4, 1e-2];

    /// Generate an instance with `t` pre-sampled scenarios. Unit costs per
    /// stage; custom costs go through [`CcpInstance::with_scenarios`].
    pub fn generate(id: impl Into<String>, dim: usize, lambda: f64, t: usize, seed: u64) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        assert!(t >= 1, "need at least one scenario");
        let mut rng = seeds::rng_from(seeds::mix(&[seed, seeds::hash_label("ccp-scenarios")]));
        let scenarios = (0..t)
            .map(|_| CcpScenario {
                alpha: (0..dim)
                    .map(|_| beta_1_b(&mut rng, Self::ALPHA_BETA))
                    .collect(),
                gamma: (0..dim)
                    .map(|_| beta_1_b(&mut rng, Self::GAMMA_BETA))
                    .collect(),
                z0: beta_1_b(&mut rng, Self::Z0_BETA),
            })
            .collect();
        Self {
            id: id.into(),
            lambda,
            costs: vec![1.0; dim],
            limits: vec![Self::DEFAULT_LIMIT; dim],
            scenarios,
        }
    }

    /// Build from explicit scenarios; used for hand-checked fixtures and
    /// custom studies.
    pub fn with_scenarios(
        id: impl Into<String>,
        lambda: f64,
        costs: Vec<f64>,
        limits: Vec<f64>,
        scenarios: Vec<CcpScenario>,
    ) -> Self {
        let dim = costs.len();
        assert!(!scenarios.is_empty());
        assert_eq!(limits.len(), dim);
        for s in &scenarios {
            assert_eq!(s.alpha.len(), dim);
            assert_eq!(s.gamma.len(), dim);
        }
        Self {
            id: id.into(),
            lambda,
            costs,
            limits,
            scenarios,
        }
    }

    /// True when `lambda` is one of the documented instance-distribution
    /// values; other values are permitted for custom studies.
    pub fn lambda_is_documented(&self) -> bool {
        Self::KNOWN_LAMBDAS.contains(&self.lambda)
    }
}

impl ProblemInstance for CcpInstance {
    fn dimension(&self) -> usize {
        self.costs.len()
    }

    fn id(&self) -> &str {
        &self.id
    }

    #[allow(clippy::needless_range_loop)]
    fn evaluate(&self, x: &BitString) -> Result<f64> {
        let dim = self.dimension();
        check_dimension(dim, x)?;
        let t = self.scenarios.len() as f64;
        let mut violations = vec![0usize; dim];
        for sc in &self.scenarios {
            let mut z = sc.z0;
            for i in 0..dim {
                let xi = f64::from(x.get(i));
                z = sc.alpha[i] * (1.0 - xi) * (1.0 - z) + (1.0 - sc.gamma[i] * xi) * z;
                if z > self.limits[i] {
                    violations[i] += 1;
                }
            }
        }
        let mut total = 0.0;
        for i in 0..dim {
            total += self.costs[i] * f64::from(x.get(i)) + violations[i] as f64 / t;
        }
        total += self.lambda * x.popcount() as f64;
        Ok(-total)
    }
}

/// Domain-specific mutation used by the CEPS baseline: a fresh instance of
/// the same dimension drawn from the training-instance distribution
/// (lambda fixed to 1e-4), with resampled scenarios.
pub fn ccp_domain_mutate<R: Rng + ?Sized>(
    parent: &CcpInstance,
    new_id: impl Into<String>,
    rng: &mut R,
) -> CcpInstance {
    let seed: u64 = rng.random();
    CcpInstance::generate(
        new_id,
        parent.dimension(),
        1e-4,
        parent.scenarios.len(),
        seed,
    )
}
