//! Run manifest: a single JSON document describing the problem class, the
//! training/test instance sources and the driver parameters. Unknown keys
//! are rejected with field-level messages.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use papforge::aac::AacBudget;
use papforge::coevolution::DaceRunConfig;
use papforge::nir::NirHyper;
use papforge::pgpe::PgpeParams;
use papforge::problems::{
    CcpInstance, ComicInstance, ExternalInstance, Graph, OneMaxInstance, ProblemInstance,
};
use papforge::seeds;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    /// Workstation-sized sampling budgets.
    Desk,
    /// Published sampling budgets (orders of magnitude slower).
    Paper,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub problem: Option<ProblemSpec>,
    #[serde(default)]
    pub run: RunParams,
    #[serde(default)]
    pub verify: VerifyParams,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read manifest {}", path.display()))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .with_context(|| format!("invalid manifest {}", path.display()))?;
        Ok(manifest)
    }

    /// Minimal manifest for commands that can run without one.
    pub fn defaults() -> Self {
        Self {
            problem: None,
            run: RunParams::default(),
            verify: VerifyParams::default(),
            seed: DEFAULT_SEED,
            output: None,
        }
    }

    pub fn problem(&self) -> Result<&ProblemSpec> {
        self.problem
            .as_ref()
            .context("manifest has no `problem` section")
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Onemax {
        train: OnemaxSet,
        #[serde(default)]
        test: Option<OnemaxSet>,
    },
    Ccp {
        train: CcpSet,
        #[serde(default)]
        test: Option<CcpSet>,
    },
    Comic {
        graph: PathBuf,
        train: ComicSet,
        #[serde(default)]
        test: Option<ComicSet>,
    },
    External {
        evaluators: Vec<ExternalSpec>,
        #[serde(default)]
        test: Option<Vec<ExternalSpec>>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnemaxSet {
    pub count: usize,
    pub dimensions: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcpSet {
    pub count: usize,
    pub dimensions: Vec<usize>,
    pub lambdas: Vec<f64>,
    #[serde(default = "default_scenarios")]
    pub scenarios: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_scenarios() -> usize {
    100
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComicSet {
    pub count: usize,
    pub dimensions: Vec<usize>,
    #[serde(default = "default_seed_a")]
    pub seed_a_count: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_seed_a() -> usize {
    5
}

fn default_replications() -> usize {
    100
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSpec {
    pub id: String,
    pub command: Vec<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

/// Driver knobs; anything unset falls back to the scale's defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunParams {
    pub portfolio_size: Option<usize>,
    pub max_rounds: Option<usize>,
    pub mining_iterations: Option<usize>,
    pub aac_max_trials: Option<usize>,
    pub aac_restarts: Option<usize>,
    pub mutation_max_iter: Option<usize>,
    pub pgpe_directions: Option<usize>,
    pub initial_configs: Option<usize>,
    pub solver_budget: Option<usize>,
    pub replications: Option<u32>,
    pub nir_norm_samples: Option<usize>,
    pub real_norm_samples: Option<usize>,
    pub training_samples: Option<usize>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub learning_rate: Option<f32>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub evaluate_repetitions: Option<usize>,
    pub feature_solutions: Option<usize>,
    pub feature_pairs: Option<usize>,
}

impl RunParams {
    pub fn to_config(&self, scale: Scale, seed: u64) -> DaceRunConfig {
        let base = match scale {
            Scale::Desk => DaceRunConfig::default(),
            Scale::Paper => DaceRunConfig::default().paper_scale(),
        };
        DaceRunConfig {
            portfolio_size: self.portfolio_size.unwrap_or(base.portfolio_size),
            max_rounds: self.max_rounds.unwrap_or(base.max_rounds),
            mining_iterations: self.mining_iterations.unwrap_or(base.mining_iterations),
            aac: AacBudget {
                max_trials: self.aac_max_trials.unwrap_or(base.aac.max_trials),
                restarts: self.aac_restarts.unwrap_or(base.aac.restarts),
            },
            mutation_max_iter: self.mutation_max_iter.unwrap_or(base.mutation_max_iter),
            pgpe: PgpeParams {
                directions: self.pgpe_directions.unwrap_or(base.pgpe.directions),
                ..base.pgpe
            },
            initial_configs: self.initial_configs.unwrap_or(base.initial_configs),
            solver_budget: self.solver_budget.unwrap_or(base.solver_budget),
            replications: self.replications.unwrap_or(base.replications),
            nir_norm_samples: self.nir_norm_samples.unwrap_or(base.nir_norm_samples),
            real_norm_samples: self.real_norm_samples.unwrap_or(base.real_norm_samples),
            training_samples: self.training_samples.unwrap_or(base.training_samples),
            nir_hyper: NirHyper {
                batch_size: self.batch_size.unwrap_or(base.nir_hyper.batch_size),
                max_epochs: self.max_epochs.unwrap_or(base.nir_hyper.max_epochs),
                patience: self.patience.unwrap_or(base.nir_hyper.patience),
                learning_rate: self.learning_rate.unwrap_or(base.nir_hyper.learning_rate),
                lambda1: self.lambda1.unwrap_or(base.nir_hyper.lambda1),
                lambda2: self.lambda2.unwrap_or(base.nir_hyper.lambda2),
            },
            seed,
        }
    }

    pub fn evaluate_repetitions(&self) -> usize {
        self.evaluate_repetitions.unwrap_or(20)
    }

    pub fn feature_counts(&self, scale: Scale) -> (usize, usize) {
        let (sols, pairs) = match scale {
            Scale::Desk => (50_000, 500_000),
            Scale::Paper => (1_000_000, 10_000_000),
        };
        (
            self.feature_solutions.unwrap_or(sols),
            self.feature_pairs.unwrap_or(pairs),
        )
    }
}

/// Closest-instance verification knobs.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyParams {
    pub dimension: usize,
    pub instances: usize,
    pub training_samples: usize,
    pub function_evaluations: usize,
    pub random_weight_nirs: usize,
    pub embedding_sampled_nirs: usize,
    pub search_set: usize,
    pub validation_set: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            dimension: 30,
            instances: 5,
            training_samples: 20_000,
            function_evaluations: 10_000,
            random_weight_nirs: 10,
            embedding_sampled_nirs: 10,
            search_set: 100_000,
            validation_set: 500_000,
            max_epochs: 200,
            patience: 10,
        }
    }
}

/// Materialized instance with an optional payload for checkpointing real
/// pool members.
pub struct BuiltInstance {
    pub instance: Arc<dyn ProblemInstance>,
    pub payload: Option<serde_json::Value>,
    pub dimension: usize,
}

fn build_onemax(set: &OnemaxSet, master: u64, group: &str) -> Vec<BuiltInstance> {
    (0..set.count)
        .map(|i| {
            let dim = set.dimensions[i % set.dimensions.len()];
            let mut rng = seeds::rng_from(seeds::mix(&[
                master,
                set.seed,
                seeds::hash_label(group),
                i as u64,
            ]));
            let inst = OneMaxInstance::random(format!("onemax-{group}-{i}"), dim, &mut rng);
            BuiltInstance {
                payload: serde_json::to_value(&inst).ok(),
                dimension: dim,
                instance: Arc::new(inst),
            }
        })
        .collect()
}

fn build_ccp(set: &CcpSet, master: u64, group: &str) -> Vec<BuiltInstance> {
    use rand::Rng;
    (0..set.count)
        .map(|i| {
            let dim = set.dimensions[i % set.dimensions.len()];
            let mut rng = seeds::rng_from(seeds::mix(&[
                master,
                set.seed,
                seeds::hash_label(group),
                i as u64,
            ]));
            let lambda = set.lambdas[rng.random_range(0..set.lambdas.len())];
            let inst = CcpInstance::generate(
                format!("ccp-{group}-{i}"),
                dim,
                lambda,
                set.scenarios,
                rng.random(),
            );
            BuiltInstance {
                payload: serde_json::to_value(&inst).ok(),
                dimension: dim,
                instance: Arc::new(inst),
            }
        })
        .collect()
}

fn build_comic(
    graph: &Arc<Graph>,
    set: &ComicSet,
    master: u64,
    group: &str,
) -> Result<Vec<BuiltInstance>> {
    use rand::Rng;
    (0..set.count)
        .map(|i| {
            let dim = set.dimensions[i % set.dimensions.len()];
            let mut rng = seeds::rng_from(seeds::mix(&[
                master,
                set.seed,
                seeds::hash_label(group),
                i as u64,
            ]));
            let scenario_seed: u64 = rng.random();
            let inst = ComicInstance::sample(
                format!("comic-{group}-{i}"),
                graph.clone(),
                dim,
                set.seed_a_count,
                set.replications,
                scenario_seed,
                &mut rng,
            )?;
            Ok(BuiltInstance {
                payload: None,
                dimension: dim,
                instance: Arc::new(inst),
            })
        })
        .collect::<papforge::Result<Vec<_>>>()
        .map_err(Into::into)
}

fn build_external(specs: &[ExternalSpec]) -> Result<Vec<BuiltInstance>> {
    specs
        .iter()
        .map(|spec| {
            let inst = ExternalInstance::spawn(
                spec.id.clone(),
                &spec.command,
                Duration::from_secs(spec.timeout_secs),
            )?;
            Ok(BuiltInstance {
                dimension: inst.dimension(),
                payload: None,
                instance: Arc::new(inst),
            })
        })
        .collect::<papforge::Result<Vec<_>>>()
        .map_err(Into::into)
}

pub struct BuiltProblem {
    pub train: Vec<BuiltInstance>,
    pub test: Vec<BuiltInstance>,
    /// Present for classes with a domain-specific generator plug-in.
    pub is_ccp: bool,
}

pub fn build_problem(manifest: &Manifest) -> Result<BuiltProblem> {
    let master = manifest.seed;
    match manifest.problem()? {
        ProblemSpec::Onemax { train, test } => Ok(BuiltProblem {
            train: build_onemax(train, master, "train"),
            test: test
                .as_ref()
                .map(|t| build_onemax(t, master, "test"))
                .unwrap_or_default(),
            is_ccp: false,
        }),
        ProblemSpec::Ccp { train, test } => Ok(BuiltProblem {
            train: build_ccp(train, master, "train"),
            test: test
                .as_ref()
                .map(|t| build_ccp(t, master, "test"))
                .unwrap_or_default(),
            is_ccp: true,
        }),
        ProblemSpec::Comic { graph, train, test } => {
            let graph = Arc::new(Graph::load(graph)?);
            Ok(BuiltProblem {
                train: build_comic(&graph, train, master, "train")?,
                test: test
                    .as_ref()
                    .map(|t| build_comic(&graph, t, master, "test"))
                    .transpose()?
                    .unwrap_or_default(),
                is_ccp: false,
            })
        }
        ProblemSpec::External { evaluators, test } => {
            if evaluators.is_empty() {
                bail!("external problem needs at least one evaluator");
            }
            Ok(BuiltProblem {
                train: build_external(evaluators)?,
                test: test
                    .as_deref()
                    .map(build_external)
                    .transpose()?
                    .unwrap_or_default(),
                is_ccp: false,
            })
        }
    }
}
