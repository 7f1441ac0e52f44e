//! The co-evolution driver: greedy initialization of the portfolio,
//! alternating portfolio evolution (configuration mining + combination
//! enumeration) and instance-population evolution, with per-phase
//! checkpointing. The same driver hosts the baseline mode that mutates real
//! instances through a domain-specific generator plug-in instead of
//! surrogate embeddings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aac::{search_configuration, AacBudget};
use crate::brkga::{sample_config, SolverConfig};
use crate::error::{Error, Result};
use crate::neural::{read_f32s, write_f32s};
use crate::nir::{
    load_checkpoint, sample_training_data, save_checkpoint, train_nirs, Nir, NirArch, NirHyper,
    NirShared,
};
use crate::pgpe::{mutate_instance, PgpeParams};
use crate::portfolio::{
    compute_norm_bounds, evaluate_config_on_instance, greedy_initialize,
    measure_config_on_instance, NormBounds, PerfCache, Portfolio,
};
use crate::problems::ProblemInstance;
use crate::seeds;

/// Quality recorded for a configuration whose single-generation population
/// exceeds the evaluation budget: such a member cannot start within the
/// protocol and must lose against any configuration that can.
pub const UNRUNNABLE_QUALITY: f64 = -1.0;

/// Driver parameters. Defaults are desk-scale; the published protocol values
/// are K = 4, MaxRound = 4, n = 20 with 800 solution evaluations per member.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DaceRunConfig {
    pub portfolio_size: usize,
    pub max_rounds: usize,
    pub mining_iterations: usize,
    pub aac: AacBudget,
    pub mutation_max_iter: usize,
    pub pgpe: PgpeParams,
    pub initial_configs: usize,
    pub solver_budget: usize,
    pub replications: u32,
    pub nir_norm_samples: usize,
    pub real_norm_samples: usize,
    pub training_samples: usize,
    pub nir_hyper: NirHyper,
    pub seed: u64,
}

impl Default for DaceRunConfig {
    fn default() -> Self {
        Self {
            portfolio_size: 4,
            max_rounds: 4,
            mining_iterations: 20,
            aac: AacBudget::default(),
            mutation_max_iter: 200,
            pgpe: PgpeParams::default(),
            initial_configs: 20,
            solver_budget: 800,
            replications: 3,
            nir_norm_samples: 100_000,
            real_norm_samples: 50_000,
            training_samples: 20_000,
            nir_hyper: NirHyper::default(),
            seed: 42,
        }
    }
}

impl DaceRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.portfolio_size < 1
            || self.max_rounds < 1
            || self.mining_iterations < 1
            || self.initial_configs < self.portfolio_size
            || self.replications < 1
        {
            return Err(Error::Config(format!(
                "driver parameters out of range: K={}, rounds={}, mining={}, initial={}, reps={}",
                self.portfolio_size,
                self.max_rounds,
                self.mining_iterations,
                self.initial_configs,
                self.replications
            )));
        }
        Ok(())
    }

    /// Paper-scale sampling and search budgets.
    pub fn paper_scale(mut self) -> Self {
        self.nir_norm_samples = 10_000_000;
        self.real_norm_samples = 1_000_000;
        self.aac.max_trials = 1600;
        self
    }
}

/// What a pool member is backed by.
#[derive(Clone)]
pub enum PoolEntry {
    Nir(Nir),
    Real(Arc<dyn ProblemInstance>),
}

/// One member of the instance population, with lazily computed
/// normalization bounds.
#[derive(Clone)]
pub struct PoolMember {
    pub entry: PoolEntry,
    instance: Arc<dyn ProblemInstance>,
    bounds: OnceLock<NormBounds>,
}

impl PoolMember {
    pub fn from_nir(nir: Nir) -> Result<Self> {
        let instance: Arc<dyn ProblemInstance> = nir.as_instance()?;
        Ok(Self {
            entry: PoolEntry::Nir(nir),
            instance,
            bounds: OnceLock::new(),
        })
    }

    pub fn from_real(instance: Arc<dyn ProblemInstance>) -> Self {
        Self {
            entry: PoolEntry::Real(instance.clone()),
            instance,
            bounds: OnceLock::new(),
        }
    }

    pub fn id(&self) -> &str {
        self.instance.id()
    }

    pub fn instance(&self) -> &Arc<dyn ProblemInstance> {
        &self.instance
    }

    pub fn is_nir(&self) -> bool {
        matches!(self.entry, PoolEntry::Nir(_))
    }
}

/// The instance population.
#[derive(Clone, Default)]
pub struct InstancePool {
    pub members: Vec<PoolMember>,
}

impl InstancePool {
    pub fn new(members: Vec<PoolMember>) -> Self {
        Self { members }
    }

    pub fn ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.id().to_string()).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Cached evaluation context shared by all driver phases.
pub struct Evaluator<'a> {
    pub cache: &'a PerfCache,
    pub cfg: &'a DaceRunConfig,
}

impl Evaluator<'_> {
    fn bounds_of(&self, member: &PoolMember) -> Result<NormBounds> {
        if let Some(b) = member.bounds.get() {
            return Ok(*b);
        }
        let samples = if member.is_nir() {
            self.cfg.nir_norm_samples
        } else {
            self.cfg.real_norm_samples
        };
        let seed = seeds::mix(&[
            self.cfg.seed,
            seeds::hash_label("norm-bounds"),
            seeds::hash_label(member.id()),
        ]);
        let bounds = compute_norm_bounds(member.instance.as_ref(), samples, seed)?;
        // A racing thread computed the identical value; either wins.
        let _ = member.bounds.set(bounds);
        Ok(*member.bounds.get().unwrap())
    }

    /// Cached quality of one configuration on one pool member. A
    /// configuration whose generation cannot fit the budget records the
    /// unrunnable sentinel instead of failing the run.
    pub fn config_on(&self, config: &SolverConfig, member: &PoolMember) -> Result<f64> {
        if let Some(entry) = self.cache.get(config, member.id()) {
            return Ok(entry.quality);
        }
        let bounds = self.bounds_of(member)?;
        let result = evaluate_config_on_instance(
            config,
            member.instance.as_ref(),
            &bounds,
            self.cfg.solver_budget,
            self.cfg.replications,
            self.cache,
            seeds::stream(self.cfg.seed, "solver-runs", 0),
        );
        match result {
            Err(Error::BudgetTooSmall { .. }) => {
                let entry = self.cache.insert_if_absent(
                    config,
                    member.id(),
                    crate::portfolio::CacheEntry {
                        quality: UNRUNNABLE_QUALITY,
                        replications: 0,
                    },
                );
                Ok(entry.quality)
            }
            other => other,
        }
    }

    /// Best-of-members quality of a portfolio on a pool member.
    pub fn portfolio_on(&self, portfolio: &Portfolio, member: &PoolMember) -> Result<f64> {
        let values: Vec<f64> = portfolio
            .members()
            .par_iter()
            .map(|c| self.config_on(c, member))
            .collect::<Result<Vec<_>>>()?;
        crate::portfolio::portfolio_performance(&values)
    }

    /// Summed portfolio quality over the pool.
    pub fn pool_objective(&self, portfolio: &Portfolio, pool: &InstancePool) -> Result<f64> {
        let per = self.portfolio_per_instance(portfolio, pool)?;
        Ok(per.values().sum())
    }

    pub fn portfolio_per_instance(
        &self,
        portfolio: &Portfolio,
        pool: &InstancePool,
    ) -> Result<BTreeMap<String, f64>> {
        pool.members
            .iter()
            .map(|m| Ok((m.id().to_string(), self.portfolio_on(portfolio, m)?)))
            .collect()
    }

    /// Evaluate every (configuration, member) pair, filling the cache.
    pub fn evaluate_all(&self, configs: &[SolverConfig], pool: &InstancePool) -> Result<()> {
        let pairs: Vec<(usize, usize)> = (0..configs.len())
            .flat_map(|c| (0..pool.len()).map(move |m| (c, m)))
            .collect();
        pairs
            .par_iter()
            .map(|&(c, m)| self.config_on(&configs[c], &pool.members[m]).map(|_| ()))
            .collect::<Result<Vec<()>>>()?;
        Ok(())
    }

    /// Uncached portfolio quality of a candidate instance with freshly
    /// computed bounds; used when probing mutation candidates.
    pub fn portfolio_on_uncached(
        &self,
        portfolio: &Portfolio,
        instance: &dyn ProblemInstance,
        norm_samples: usize,
    ) -> Result<f64> {
        let seed = seeds::mix(&[
            self.cfg.seed,
            seeds::hash_label("norm-bounds"),
            seeds::hash_label(instance.id()),
        ]);
        let bounds = compute_norm_bounds(instance, norm_samples, seed)?;
        let values: Vec<f64> = portfolio
            .members()
            .par_iter()
            .map(|c| {
                match measure_config_on_instance(
                    c,
                    instance,
                    &bounds,
                    self.cfg.solver_budget,
                    self.cfg.replications,
                    seeds::stream(self.cfg.seed, "solver-runs", 0),
                ) {
                    Err(Error::BudgetTooSmall { .. }) => Ok(UNRUNNABLE_QUALITY),
                    other => other,
                }
            })
            .collect::<Result<Vec<_>>>()?;
        crate::portfolio::portfolio_performance(&values)
    }
}

/// Result of the combination enumeration.
#[derive(Clone, Debug)]
pub struct CombinationSelection {
    pub portfolio: Portfolio,
    pub objective: f64,
    pub subsets_visited: u64,
}

/// Enumerate all K-subsets of the candidate set and return the one with the
/// highest summed best-of-subset quality over the instances, using only
/// recorded cache values. Subsets containing value-duplicate configurations
/// are visited but not eligible (a duplicate adds nothing under the max);
/// if every subset is ineligible the best one is returned with duplicates
/// retained.
pub fn select_best_combination(
    psi: &[SolverConfig],
    instance_ids: &[String],
    k: usize,
    cache: &PerfCache,
) -> Result<CombinationSelection> {
    if psi.len() < k || k == 0 {
        return Err(Error::NotEnoughCandidates {
            needed: k.max(1),
            got: psi.len(),
        });
    }
    let values: Vec<Vec<f64>> = psi
        .iter()
        .map(|c| {
            instance_ids
                .iter()
                .map(|m| cache.get_required(c, m))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let keys: Vec<String> = psi.iter().map(|c| c.value_key()).collect();
    let instance_count = instance_ids.len();

    let mut visited = 0u64;
    let mut best: Option<(Vec<usize>, f64, bool)> = None;
    let mut comb: Vec<usize> = (0..k).collect();
    loop {
        visited += 1;
        let mut distinct = true;
        'dup: for a in 0..k {
            for b in (a + 1)..k {
                if keys[comb[a]] == keys[comb[b]] {
                    distinct = false;
                    break 'dup;
                }
            }
        }
        let mut objective = 0.0;
        #[allow(clippy::needless_range_loop)]
        for m in 0..instance_count {
            let col_best = comb
                .iter()
                .map(|&ci| values[ci][m])
                .fold(f64::NEG_INFINITY, f64::max);
            objective += col_best;
        }
        let better = match &best {
            None => true,
            // Eligible subsets always beat ineligible ones.
            Some((_, b_obj, b_distinct)) => {
                (distinct && !*b_distinct) || (distinct == *b_distinct && objective > *b_obj)
            }
        };
        if better {
            best = Some((comb.clone(), objective, distinct));
        }

        // Advance to the next lexicographic combination, or finish.
        let n = psi.len();
        let mut i = k;
        let advanced = loop {
            if i == 0 {
                break false;
            }
            i -= 1;
            if comb[i] != i + n - k {
                comb[i] += 1;
                for j in i + 1..k {
                    comb[j] = comb[j - 1] + 1;
                }
                break true;
            }
        };
        if !advanced {
            let (indices, objective, distinct) = best.expect("combinations visited");
            let members: Vec<SolverConfig> = indices.iter().map(|&i| psi[i].clone()).collect();
            let portfolio = if distinct {
                Portfolio::new(members)?
            } else {
                Portfolio::with_duplicates(members)?
            };
            return Ok(CombinationSelection {
                portfolio,
                objective,
                subsets_visited: visited,
            });
        }
    }
}

/// Configuration-mining plug-in: given the partial portfolio, the mining
/// iteration and the removed member index, find a complementary
/// configuration (evaluating candidates through the cache as it goes).
pub type SearcherFn<'a> = dyn FnMut(&[SolverConfig], usize, usize) -> Result<SolverConfig> + 'a;

/// Outcome of one portfolio-evolution phase.
#[derive(Clone, Debug)]
pub struct PapEvolution {
    pub portfolio: Portfolio,
    pub objective: f64,
    pub psi: Vec<SolverConfig>,
    pub subsets_visited: u64,
    pub removed_sequence: Vec<usize>,
}

/// Configuration mining followed by combination enumeration: n times,
/// remove member `i mod K`, search a complementary configuration for the
/// remainder, and collect it into the candidate set; then pick the best
/// K-subset of the K + n candidates from cached values.
pub fn evolve_pap(
    portfolio: &Portfolio,
    instance_ids: &[String],
    n_mining: usize,
    searcher: &mut SearcherFn<'_>,
    cache: &PerfCache,
) -> Result<PapEvolution> {
    let k = portfolio.len();
    let mut psi: Vec<SolverConfig> = portfolio.members().to_vec();
    let mut removed_sequence = Vec::with_capacity(n_mining);
    for i in 1..=n_mining {
        let j = i % k;
        removed_sequence.push(j);
        let partial = portfolio.without_member(j);
        let found = searcher(&partial, i, j)?;
        psi.push(found);
    }
    let selection = select_best_combination(&psi, instance_ids, k, cache)?;
    Ok(PapEvolution {
        portfolio: selection.portfolio,
        objective: selection.objective,
        psi,
        subsets_visited: selection.subsets_visited,
        removed_sequence,
    })
}

/// True when the candidate quality is strictly below the portfolio's
/// quality on every pool member (cached values only).
pub fn is_challenging(
    f_candidate: f64,
    portfolio: &Portfolio,
    pool: &InstancePool,
    cache: &PerfCache,
) -> Result<bool> {
    if pool.is_empty() {
        return Err(Error::Config("instance population is empty".into()));
    }
    let mut pool_min = f64::INFINITY;
    for m in pool.members.iter() {
        let per_member: Vec<f64> = portfolio
            .members()
            .iter()
            .map(|c| cache.get_required(c, m.id()))
            .collect::<Result<_>>()?;
        pool_min = pool_min.min(crate::portfolio::portfolio_performance(&per_member)?);
    }
    Ok(f_candidate < pool_min)
}

/// Context handed to a mutation plug-in.
pub struct MutationContext<'a, 'b> {
    pub round: usize,
    pub iteration: u64,
    pub portfolio: &'a Portfolio,
    pub evaluator: &'a Evaluator<'b>,
}

/// A mutation plug-in: builds a new pool member from a parent and its
/// portfolio quality. Returns the member plus the mutation's own quality
/// estimate when it has one.
pub type MutateFn<'a> =
    dyn FnMut(&PoolMember, f64, &MutationContext<'_, '_>) -> Result<(PoolMember, Option<f64>)> + 'a;

/// Outcome of one instance-evolution phase.
pub struct InstanceEvolution {
    pub pool: InstancePool,
    pub added: Vec<(String, f64)>,
    pub attempts: usize,
}

/// Instance mining: repeat floor(|M|/2) times, mutate a random member of
/// the pristine copy, test the portfolio on the mutant, and let it replace
/// a random strictly-easier member of the working population; stop early
/// when no member is easier. The returned pool is the pristine copy plus
/// the accepted mutants.
pub fn evolve_instances(
    round: usize,
    portfolio: &Portfolio,
    pool: &InstancePool,
    evaluator: &Evaluator<'_>,
    mutate: &mut MutateFn<'_>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<InstanceEvolution> {
    let fitness_f: Vec<f64> = pool
        .members
        .iter()
        .map(|m| evaluator.portfolio_on(portfolio, m))
        .collect::<Result<_>>()?;

    let mut working: Vec<usize> = (0..pool.len()).collect();
    let mut accepted: Vec<PoolMember> = Vec::new();
    let mut added = Vec::new();
    let mut attempts = 0usize;

    for it in 0..pool.len() / 2 {
        attempts += 1;
        let parent_idx = rng.random_range(0..pool.len());
        let parent = &pool.members[parent_idx];
        let ctx = MutationContext {
            round,
            iteration: it as u64,
            portfolio,
            evaluator,
        };
        let (child, _estimate) = mutate(parent, fitness_f[parent_idx], &ctx)?;
        let child_f = evaluator.portfolio_on(portfolio, &child)?;

        let easier: Vec<usize> = working
            .iter()
            .copied()
            .filter(|&w| fitness_f[w] > child_f)
            .collect();
        if easier.is_empty() {
            break;
        }
        let victim = easier[rng.random_range(0..easier.len())];
        working.retain(|&w| w != victim);
        added.push((child.id().to_string(), child_f));
        accepted.push(child);
    }

    let mut members: Vec<PoolMember> = pool.members.clone();
    members.extend(accepted);
    Ok(InstanceEvolution {
        pool: InstancePool::new(members),
        added,
        attempts,
    })
}

// ---------------------------------------------------------------------------
// Run directory layout, logging and checkpointing.
// ---------------------------------------------------------------------------

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_json(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn cache_json(&self) -> PathBuf {
        self.root.join("cache.json")
    }

    pub fn log_jsonl(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    pub fn state_json(&self) -> PathBuf {
        self.root.join("state.json")
    }

    pub fn nirs_dir(&self) -> PathBuf {
        self.root.join("nirs")
    }

    pub fn round_dir(&self, round: usize) -> PathBuf {
        self.root.join(format!("round_{round}"))
    }

    pub fn pap_json(&self, round: usize) -> PathBuf {
        self.round_dir(round).join("pap.json")
    }

    pub fn pool_dir(&self, round: usize) -> PathBuf {
        self.round_dir(round).join("pool")
    }
}

/// One line per event, JSON-encoded, with a sequence number.
pub struct RunLogger {
    file: Mutex<(std::fs::File, u64)>,
}

impl RunLogger {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            file: Mutex::new((file, 0)),
        })
    }

    pub fn log(&self, event: &str, fields: serde_json::Value) {
        use std::io::Write;
        let mut guard = self.file.lock().expect("log lock");
        let seq = guard.1;
        guard.1 += 1;
        let mut object = serde_json::json!({ "seq": seq, "event": event });
        if let (Some(dst), Some(src)) = (object.as_object_mut(), fields.as_object()) {
            for (k, v) in src {
                dst.insert(k.clone(), v.clone());
            }
        }
        let _ = writeln!(guard.0, "{object}");
        let _ = guard.0.flush();
    }
}

/// Portfolio checkpoint written after every portfolio-evolution phase.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PapCheckpoint {
    pub round: usize,
    pub members: Vec<SolverConfig>,
    pub objective: f64,
    pub psi_size: usize,
    pub subsets_visited: u64,
    pub per_instance: BTreeMap<String, f64>,
}

/// Driver cursor persisted to state.json.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initialized,
    PapEvolved,
    InstancesEvolved,
    Finished,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RunState {
    pub round: usize,
    pub phase: Phase,
}

#[derive(Serialize, Deserialize)]
struct PoolManifest {
    member_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PoolMemberRecord {
    id: String,
    kind: String,
    /// Serialized instance payload for real members.
    #[serde(skip_serializing_if = "Option::is_none")]
    payload: Option<serde_json::Value>,
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Serialize the pool into a round directory. NIR members store their
/// embeddings; real members store the payload produced by `real_payload`.
pub fn write_pool(
    dir: &Path,
    pool: &InstancePool,
    real_payload: &dyn Fn(&Arc<dyn ProblemInstance>) -> Result<serde_json::Value>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = PoolManifest {
        member_ids: pool.ids(),
    };
    std::fs::write(
        dir.join("pool.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    for member in &pool.members {
        let stem = sanitize(member.id());
        let record = match &member.entry {
            PoolEntry::Nir(nir) => {
                write_f32s(&dir.join(format!("{stem}.emb.bin")), &nir.embedding)?;
                PoolMemberRecord {
                    id: member.id().to_string(),
                    kind: "nir".into(),
                    payload: None,
                }
            }
            PoolEntry::Real(instance) => PoolMemberRecord {
                id: member.id().to_string(),
                kind: "real".into(),
                payload: Some(real_payload(instance)?),
            },
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&record)?,
        )?;
    }
    Ok(())
}

/// Rebuild an NIR pool from a round directory.
pub fn read_nir_pool(dir: &Path, shared: &Arc<NirShared>) -> Result<InstancePool> {
    let manifest: PoolManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("pool.json"))?)?;
    let members = manifest
        .member_ids
        .iter()
        .map(|id| {
            let stem = sanitize(id);
            let record: PoolMemberRecord =
                serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
            if record.kind != "nir" {
                return Err(Error::Checkpoint(format!(
                    "pool member {id} is not an NIR checkpoint"
                )));
            }
            let embedding = read_f32s(&dir.join(format!("{stem}.emb.bin")))?;
            PoolMember::from_nir(Nir::new(shared.clone(), embedding, id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InstancePool::new(members))
}

/// Final result of a driver run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub portfolio: Portfolio,
    pub objective: f64,
    pub rounds_completed: usize,
}

struct Driver<'a> {
    cfg: &'a DaceRunConfig,
    paths: &'a RunPaths,
    logger: &'a RunLogger,
    cache: &'a PerfCache,
}

impl Driver<'_> {
    fn write_state(&self, state: RunState) -> Result<()> {
        std::fs::write(
            self.paths.state_json(),
            serde_json::to_string_pretty(&state)?,
        )?;
        Ok(())
    }

    fn write_pap(&self, checkpoint: &PapCheckpoint) -> Result<()> {
        std::fs::create_dir_all(self.paths.round_dir(checkpoint.round))?;
        std::fs::write(
            self.paths.pap_json(checkpoint.round),
            serde_json::to_string_pretty(checkpoint)?,
        )?;
        Ok(())
    }

    fn run(
        &self,
        mut pool: InstancePool,
        mut portfolio: Option<Portfolio>,
        resume_state: Option<RunState>,
        mutate: &mut MutateFn<'_>,
        real_payload: &dyn Fn(&Arc<dyn ProblemInstance>) -> Result<serde_json::Value>,
    ) -> Result<RunOutcome> {
        let cfg = self.cfg;
        let evaluator = Evaluator {
            cache: self.cache,
            cfg,
        };

        // Initialization: sample C, evaluate the full C x M matrix, pick
        // the greedy portfolio.
        if portfolio.is_none() {
            let mut rng = seeds::rng_from(seeds::stream(cfg.seed, "init-configs", 0));
            let candidates: Vec<SolverConfig> = (0..cfg.initial_configs)
                .map(|_| sample_config(&mut rng))
                .collect();
            evaluator.evaluate_all(&candidates, &pool)?;
            let p = greedy_initialize(&candidates, &pool.ids(), cfg.portfolio_size, self.cache)?;
            let per_instance = evaluator.portfolio_per_instance(&p, &pool)?;
            let objective: f64 = per_instance.values().sum();
            self.logger.log(
                "initialized",
                serde_json::json!({
                    "candidates": cfg.initial_configs,
                    "objective": objective,
                    "cache_entries": self.cache.len(),
                }),
            );
            self.write_pap(&PapCheckpoint {
                round: 0,
                members: p.members().to_vec(),
                objective,
                psi_size: cfg.initial_configs,
                subsets_visited: 0,
                per_instance,
            })?;
            write_pool(&self.paths.pool_dir(0), &pool, real_payload)?;
            self.cache.save_json(&self.paths.cache_json())?;
            self.write_state(RunState {
                round: 0,
                phase: Phase::Initialized,
            })?;
            portfolio = Some(p);
        }
        let mut portfolio = portfolio.expect("portfolio initialized");

        // Where to continue.
        let (mut next_round, mut pending_instance_phase) = match resume_state {
            None => (1, false),
            Some(RunState { round, phase }) => match phase {
                Phase::Initialized => (1, false),
                Phase::PapEvolved => (round, round < cfg.max_rounds),
                Phase::InstancesEvolved => (round + 1, false),
                // A finished run can be extended with a larger round limit;
                // it continues exactly like a just-evolved portfolio.
                Phase::Finished if round >= cfg.max_rounds => (cfg.max_rounds + 1, false),
                Phase::Finished => (round, round < cfg.max_rounds),
            },
        };

        loop {
            if pending_instance_phase {
                let round = next_round;
                let mut rng =
                    seeds::rng_from(seeds::stream(cfg.seed, "pool-evolution", round as u64));
                let evolution =
                    evolve_instances(round, &portfolio, &pool, &evaluator, mutate, &mut rng)?;
                for (id, f) in &evolution.added {
                    let challenging = is_challenging(*f, &portfolio, &pool, self.cache)?;
                    self.logger.log(
                        "instance_added",
                        serde_json::json!({
                            "round": round,
                            "id": id,
                            "quality": f,
                            "challenging": challenging,
                        }),
                    );
                }
                self.logger.log(
                    "instances_evolved",
                    serde_json::json!({
                        "round": round,
                        "attempts": evolution.attempts,
                        "added": evolution.added.len(),
                        "pool_size": evolution.pool.len(),
                    }),
                );
                pool = evolution.pool;
                write_pool(&self.paths.pool_dir(round), &pool, real_payload)?;
                self.cache.save_json(&self.paths.cache_json())?;
                self.write_state(RunState {
                    round,
                    phase: Phase::InstancesEvolved,
                })?;
                pending_instance_phase = false;
                next_round = round + 1;
                continue;
            }
            if next_round > cfg.max_rounds {
                break;
            }
            let round = next_round;
            let objective_before = evaluator.pool_objective(&portfolio, &pool)?;
            let evolution = self.pap_phase(round, &portfolio, &pool, &evaluator)?;
            self.logger.log(
                "pap_evolved",
                serde_json::json!({
                    "round": round,
                    "objective_before": objective_before,
                    "objective_after": evolution.objective,
                    "psi_size": evolution.psi.len(),
                    "subsets_visited": evolution.subsets_visited,
                    "removed_sequence": evolution.removed_sequence,
                }),
            );
            portfolio = evolution.portfolio;
            let per_instance = evaluator.portfolio_per_instance(&portfolio, &pool)?;
            self.write_pap(&PapCheckpoint {
                round,
                members: portfolio.members().to_vec(),
                objective: evolution.objective,
                psi_size: evolution.psi.len(),
                subsets_visited: evolution.subsets_visited,
                per_instance,
            })?;
            self.cache.save_json(&self.paths.cache_json())?;
            self.write_state(RunState {
                round,
                phase: Phase::PapEvolved,
            })?;

            if round < cfg.max_rounds {
                pending_instance_phase = true;
            } else {
                next_round = round + 1;
            }
        }

        let objective = evaluator.pool_objective(&portfolio, &pool)?;
        self.write_state(RunState {
            round: cfg.max_rounds,
            phase: Phase::Finished,
        })?;
        self.logger.log(
            "finished",
            serde_json::json!({ "objective": objective, "rounds": cfg.max_rounds }),
        );
        Ok(RunOutcome {
            portfolio,
            objective,
            rounds_completed: cfg.max_rounds,
        })
    }

    fn pap_phase(
        &self,
        round: usize,
        portfolio: &Portfolio,
        pool: &InstancePool,
        evaluator: &Evaluator<'_>,
    ) -> Result<PapEvolution> {
        let cfg = self.cfg;
        let ids = pool.ids();
        let mut searcher = |partial: &[SolverConfig],
                            mining_idx: usize,
                            _removed: usize|
         -> Result<SolverConfig> {
            let base: Vec<f64> = pool
                .members
                .iter()
                .map(|m| {
                    let mut best = f64::NEG_INFINITY;
                    for c in partial {
                        best = best.max(self.cache.get_required(c, m.id())?);
                    }
                    Ok(best)
                })
                .collect::<Result<_>>()?;
            let eval = |c: &SolverConfig, mi: usize| evaluator.config_on(c, &pool.members[mi]);
            let mut rng = seeds::rng_from(seeds::stream(
                cfg.seed,
                "aac",
                (round * 100_000 + mining_idx) as u64,
            ));
            let outcome = search_configuration(&base, &cfg.aac, &eval, &mut rng)?;
            Ok(outcome.config)
        };
        evolve_pap(
            portfolio,
            &ids,
            cfg.mining_iterations,
            &mut searcher,
            self.cache,
        )
    }
}

fn nir_pool_only(_: &Arc<dyn ProblemInstance>) -> Result<serde_json::Value> {
    Err(Error::Checkpoint(
        "unexpected real instance in an NIR pool".into(),
    ))
}

/// Median dimension of the training set; the pad/truncate encoding maps
/// every instance onto this model dimension.
pub fn model_dimension(instances: &[Arc<dyn ProblemInstance>]) -> usize {
    let mut dims: Vec<usize> = instances.iter().map(|i| i.dimension()).collect();
    dims.sort_unstable();
    dims[dims.len() / 2]
}

/// Full run: train NIRs for the training instances (or reuse the run
/// directory's checkpoint), greedy-initialize a portfolio, then alternate
/// portfolio evolution and embedding-space instance evolution,
/// checkpointing after every phase. Resumes from the recorded state when
/// the run directory already contains one.
pub fn run_dace(
    training_instances: &[Arc<dyn ProblemInstance>],
    cfg: &DaceRunConfig,
    run_dir: &Path,
) -> Result<RunOutcome> {
    assert!(!training_instances.is_empty());
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let paths = RunPaths::new(run_dir);
    if !paths.config_json().exists() {
        std::fs::write(paths.config_json(), serde_json::to_string_pretty(cfg)?)?;
    }
    let logger = RunLogger::create(&paths.log_jsonl())?;

    // Surrogate training (reused on resume).
    let nirs_dir = paths.nirs_dir();
    let (shared, nirs) = if nirs_dir.join("manifest.json").exists() {
        let (shared, nirs, _manifest) = load_checkpoint(&nirs_dir)?;
        logger.log("nirs_loaded", serde_json::json!({ "count": nirs.len() }));
        (shared, nirs)
    } else {
        let d_model = model_dimension(training_instances);
        let data: Vec<_> = training_instances
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                sample_training_data(
                    inst.as_ref(),
                    cfg.training_samples,
                    seeds::stream(cfg.seed, "training-data", i as u64),
                )
            })
            .collect::<Result<_>>()?;
        let arch = NirArch::standard(d_model);
        let (shared, embeddings, report) = train_nirs(
            &arch,
            &data,
            &cfg.nir_hyper,
            seeds::stream(cfg.seed, "nir-train", 0),
        )?;
        let shared = Arc::new(shared);
        let nirs: Vec<Nir> = embeddings
            .into_iter()
            .zip(training_instances)
            .map(|(e, inst)| Nir::new(shared.clone(), e, format!("nir:{}", inst.id())))
            .collect();
        save_checkpoint(&nirs_dir, &shared, &nirs, &cfg.nir_hyper, &report)?;
        logger.log(
            "nirs_trained",
            serde_json::json!({
                "count": nirs.len(),
                "epochs": report.epochs_run,
                "d_model": d_model,
            }),
        );
        (shared, nirs)
    };

    // Resume bookkeeping.
    let mut resume_state = None;
    let mut portfolio = None;
    let mut pool = InstancePool::new(
        nirs.iter()
            .map(|n| PoolMember::from_nir(n.clone()))
            .collect::<Result<Vec<_>>>()?,
    );
    let mut cache = PerfCache::new();
    if paths.state_json().exists() {
        let state: RunState = serde_json::from_str(&std::fs::read_to_string(paths.state_json())?)?;
        cache = PerfCache::load_json(&paths.cache_json())?;
        let pap_round = match state.phase {
            Phase::Initialized => 0,
            Phase::PapEvolved | Phase::Finished => state.round,
            Phase::InstancesEvolved => state.round,
        };
        let pap: PapCheckpoint =
            serde_json::from_str(&std::fs::read_to_string(paths.pap_json(pap_round))?)?;
        portfolio = Some(Portfolio::with_duplicates(pap.members)?);
        let pool_round = match state.phase {
            Phase::Initialized => 0,
            Phase::PapEvolved => state.round - 1,
            Phase::InstancesEvolved => state.round,
            Phase::Finished => state.round - 1,
        };
        pool = read_nir_pool(&paths.pool_dir(pool_round), &shared)?;
        logger.log(
            "resumed",
            serde_json::json!({ "round": state.round, "phase": format!("{:?}", state.phase) }),
        );
        resume_state = Some(state);
    }

    let driver = Driver {
        cfg,
        paths: &paths,
        logger: &logger,
        cache: &cache,
    };

    // Embedding-space mutation plug-in.
    let logger_ref = &logger;
    let mut mutate = |parent: &PoolMember,
                      parent_f: f64,
                      ctx: &MutationContext<'_, '_>|
     -> Result<(PoolMember, Option<f64>)> {
        let PoolEntry::Nir(parent_nir) = &parent.entry else {
            return Err(Error::Config("embedding mutation needs an NIR pool".into()));
        };
        let child_id = format!("synth-r{}-i{}", ctx.round, ctx.iteration);
        let probe_eval = |candidate: &Nir| -> Result<f64> {
            let instance = candidate.as_instance()?;
            ctx.evaluator.portfolio_on_uncached(
                ctx.portfolio,
                instance.as_ref(),
                cfg.nir_norm_samples,
            )
        };
        let outcome = mutate_instance(
            parent_nir,
            parent_f,
            cfg.mutation_max_iter,
            &cfg.pgpe,
            &probe_eval,
            &child_id,
            seeds::stream(
                cfg.seed,
                "mutate",
                (ctx.round * 1000) as u64 + ctx.iteration,
            ),
        )?;
        logger_ref.log(
            "mutation",
            serde_json::json!({
                "round": ctx.round,
                "parent": parent.id(),
                "child": child_id,
                "parent_quality": parent_f,
                "child_quality": outcome.f,
                "reverted": outcome.reverted,
                "probe_evaluations": outcome.evaluations,
            }),
        );
        Ok((PoolMember::from_nir(outcome.nir)?, Some(outcome.f)))
    };

    driver.run(pool, portfolio, resume_state, &mut mutate, &nir_pool_only)
}

/// Domain-generator plug-in used by the baseline mode: produce a fresh real
/// instance from a parent, plus its serialization payload for checkpoints.
pub type DomainMutateFn<'a> =
    dyn FnMut(&Arc<dyn ProblemInstance>, &str, u64) -> Result<Arc<dyn ProblemInstance>> + 'a;

/// Baseline two-population run over real instances: the identical driver
/// with the embedding-space mutation replaced by a domain-specific instance
/// generator. Checkpoints are written but resume is not wired for real
/// pools.
pub fn run_ceps_baseline(
    training_instances: &[Arc<dyn ProblemInstance>],
    cfg: &DaceRunConfig,
    run_dir: &Path,
    domain_mutate: &mut DomainMutateFn<'_>,
    real_payload: &dyn Fn(&Arc<dyn ProblemInstance>) -> Result<serde_json::Value>,
) -> Result<RunOutcome> {
    assert!(!training_instances.is_empty());
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let paths = RunPaths::new(run_dir);
    if !paths.config_json().exists() {
        std::fs::write(paths.config_json(), serde_json::to_string_pretty(cfg)?)?;
    }
    let logger = RunLogger::create(&paths.log_jsonl())?;
    let cache = PerfCache::new();
    let pool = InstancePool::new(
        training_instances
            .iter()
            .map(|i| PoolMember::from_real(i.clone()))
            .collect(),
    );
    let driver = Driver {
        cfg,
        paths: &paths,
        logger: &logger,
        cache: &cache,
    };
    let logger_ref = &logger;
    let mut mutate = |parent: &PoolMember,
                      parent_f: f64,
                      ctx: &MutationContext<'_, '_>|
     -> Result<(PoolMember, Option<f64>)> {
        let child_id = format!("gen-r{}-i{}", ctx.round, ctx.iteration);
        let child = domain_mutate(
            parent.instance(),
            &child_id,
            seeds::stream(
                cfg.seed,
                "domain-mutate",
                (ctx.round * 1000) as u64 + ctx.iteration,
            ),
        )?;
        logger_ref.log(
            "domain_mutation",
            serde_json::json!({
                "round": ctx.round,
                "parent": parent.id(),
                "child": child_id,
                "parent_quality": parent_f,
            }),
        );
        Ok((PoolMember::from_real(child), None))
    };
    driver.run(pool, None, None, &mut mutate, real_payload)
}
