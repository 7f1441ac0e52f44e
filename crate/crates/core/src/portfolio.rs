//! Portfolio type, best-of-K performance, sampling-based quality
//! normalization, cached configuration-on-instance evaluation, greedy
//! initialization, and the manual baseline portfolio.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::RwLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brkga::{brkga_run, SolverConfig};
use crate::error::{Error, Result};
use crate::problems::{BitString, ProblemInstance};
use crate::seeds;

/// Ordered list of member configurations with best-of-K semantics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Portfolio {
    members: Vec<SolverConfig>,
}

impl Portfolio {
    /// Build a portfolio of distinct members.
    pub fn new(members: Vec<SolverConfig>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyPortfolio);
        }
        let mut seen = std::collections::HashSet::new();
        for m in &members {
            if !seen.insert(m.value_key()) {
                return Err(Error::Config(format!(
                    "duplicate member configuration {}",
                    m.value_key()
                )));
            }
        }
        Ok(Self { members })
    }

    /// Build a portfolio that explicitly allows repeated members.
    pub fn with_duplicates(members: Vec<SolverConfig>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyPortfolio);
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[SolverConfig] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Members minus the one at `idx`.
    pub fn without_member(&self, idx: usize) -> Vec<SolverConfig> {
        let mut rest = self.members.clone();
        rest.remove(idx);
        rest
    }
}

/// Best performance among the member results.
pub fn portfolio_performance(per_member: &[f64]) -> Result<f64> {
    per_member
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        })
        .ok_or(Error::EmptyPortfolio)
}

/// Objective range of an instance estimated from random sampling, used to
/// normalize raw qualities. Frozen per instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBounds {
    pub f_min: f64,
    pub f_max: f64,
    pub sample_count: usize,
}

impl NormBounds {
    pub fn new(f_min: f64, f_max: f64, sample_count: usize) -> Result<Self> {
        if !(f_min.is_finite() && f_max.is_finite()) || f_max < f_min {
            return Err(Error::NonFinite("normalization bounds"));
        }
        Ok(Self {
            f_min,
            f_max,
            sample_count,
        })
    }
}

/// Map a raw objective value to normalized quality. Values above 1 mean the
/// search beat the sampled maximum.
pub fn normalized_quality(raw: f64, bounds: &NormBounds) -> Result<f64> {
    if bounds.f_max <= bounds.f_min {
        return Err(Error::DegenerateInstance(format!(
            "f_min = f_max = {}",
            bounds.f_min
        )));
    }
    Ok((raw - bounds.f_min) / (bounds.f_max - bounds.f_min))
}

/// Min/max objective over `n_samples` uniform-random solutions.
///
/// When the full solution space is no larger than the requested sample the
/// bounds are computed by exhaustive enumeration instead, which is both
/// cheaper and exact.
pub fn compute_norm_bounds(
    instance: &dyn ProblemInstance,
    n_samples: usize,
    seed: u64,
) -> Result<NormBounds> {
    assert!(n_samples >= 2, "need at least two samples");
    let dim = instance.dimension();
    const CHUNK: usize = 4096;

    type ChunkGen = Box<dyn Fn(u64, u64) -> Vec<BitString> + Sync>;
    let exhaustive = dim < 64 && (1u64 << dim) <= n_samples as u64;
    let (total, gen): (u64, ChunkGen) = if exhaustive {
        let total = 1u64 << dim;
        (
            total,
            Box::new(move |start, len| {
                (start..start + len)
                    .map(|i| BitString::nth(dim, i))
                    .collect()
            }),
        )
    } else {
        (
            n_samples as u64,
            Box::new(move |start, len| {
                let chunk_idx = start / CHUNK as u64;
                let mut rng =
                    seeds::rng_from(seeds::mix(&[seed, seeds::hash_label("bounds"), chunk_idx]));
                (0..len).map(|_| BitString::random(dim, &mut rng)).collect()
            }),
        )
    };

    let chunk_starts: Vec<u64> = (0..total).step_by(CHUNK).collect();
    let partials: Vec<Result<(f64, f64)>> = chunk_starts
        .par_iter()
        .map(|&start| {
            let len = CHUNK.min((total - start) as usize) as u64;
            let xs = gen(start, len);
            let ys = instance.evaluate_batch(&xs)?;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in ys {
                if !y.is_finite() {
                    return Err(Error::NonFinite("objective value"));
                }
                lo = lo.min(y);
                hi = hi.max(y);
            }
            Ok((lo, hi))
        })
        .collect();

    let mut f_min = f64::INFINITY;
    let mut f_max = f64::NEG_INFINITY;
    for p in partials {
        let (lo, hi) = p?;
        f_min = f_min.min(lo);
        f_max = f_max.max(hi);
    }
    NormBounds::new(f_min, f_max, total as usize)
}

/// One recorded configuration-on-instance result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub quality: f64,
    pub replications: u32,
}

/// Map from (configuration value identity, instance identity) to normalized
/// quality. Entries are immutable once written; lookups for recorded pairs
/// never re-run the solver. Reads are concurrent, insertion is exclusive.
#[derive(Debug, Default)]
pub struct PerfCache {
    inner: RwLock<BTreeMap<String, CacheEntry>>,
}

impl PerfCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(config: &SolverConfig, instance_id: &str) -> String {
        format!("{}|{}", config.value_key(), instance_id)
    }

    pub fn get(&self, config: &SolverConfig, instance_id: &str) -> Option<CacheEntry> {
        self.inner
            .read()
            .expect("cache lock")
            .get(&Self::key(config, instance_id))
            .copied()
    }

    /// Cached quality or a missing-entry error.
    pub fn get_required(&self, config: &SolverConfig, instance_id: &str) -> Result<f64> {
        self.get(config, instance_id)
            .map(|e| e.quality)
            .ok_or_else(|| Error::MissingCacheEntry {
                config: config.value_key(),
                instance: instance_id.to_string(),
            })
    }

    /// First write wins; the recorded entry is returned either way.
    pub fn insert_if_absent(
        &self,
        config: &SolverConfig,
        instance_id: &str,
        entry: CacheEntry,
    ) -> CacheEntry {
        let mut map = self.inner.write().expect("cache lock");
        *map.entry(Self::key(config, instance_id)).or_insert(entry)
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let map = self.inner.read().expect("cache lock");
        let json = serde_json::to_string_pretty(&*map)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let map: BTreeMap<String, CacheEntry> = serde_json::from_str(&text)?;
        Ok(Self {
            inner: RwLock::new(map),
        })
    }
}

/// Mean normalized quality over `reps` deterministic-seeded solver runs.
/// Replication seeds derive from the configuration identity, the instance
/// identity and the replication index, so results are independent of
/// scheduling.
pub fn measure_config_on_instance(
    config: &SolverConfig,
    instance: &dyn ProblemInstance,
    bounds: &NormBounds,
    budget: usize,
    reps: u32,
    seed_base: u64,
) -> Result<f64> {
    assert!(reps >= 1);
    let cfg_hash = seeds::hash_label(&config.value_key());
    let inst_hash = seeds::hash_label(instance.id());
    let mut acc = 0.0;
    for rep in 0..u64::from(reps) {
        let seed = seeds::mix(&[seed_base, cfg_hash, inst_hash, rep]);
        let run = brkga_run(config, instance, budget, seed)?;
        acc += normalized_quality(run.best_y, bounds)?;
    }
    Ok(acc / f64::from(reps))
}

/// Memoized [`measure_config_on_instance`]: a recorded pair is returned
/// from the cache without running the solver.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_config_on_instance(
    config: &SolverConfig,
    instance: &dyn ProblemInstance,
    bounds: &NormBounds,
    budget: usize,
    reps: u32,
    cache: &PerfCache,
    seed_base: u64,
) -> Result<f64> {
    if let Some(entry) = cache.get(config, instance.id()) {
        return Ok(entry.quality);
    }
    let quality = measure_config_on_instance(config, instance, bounds, budget, reps, seed_base)?;
    let entry = cache.insert_if_absent(
        config,
        instance.id(),
        CacheEntry {
            quality,
            replications: reps,
        },
    );
    Ok(entry.quality)
}

/// Greedy portfolio initialization: iteratively add the configuration with
/// the largest marginal improvement of the summed best-of-portfolio quality
/// over the instances, breaking ties by lowest candidate index. All
/// (candidate, instance) pairs must already be cached.
pub fn greedy_initialize(
    candidates: &[SolverConfig],
    instance_ids: &[String],
    k: usize,
    cache: &PerfCache,
) -> Result<Portfolio> {
    if candidates.len() < k {
        return Err(Error::NotEnoughCandidates {
            needed: k,
            got: candidates.len(),
        });
    }
    assert!(k >= 1);
    let values: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| {
            instance_ids
                .iter()
                .map(|m| cache.get_required(c, m))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut current_best = vec![f64::NEG_INFINITY; instance_ids.len()];
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best_idx = None;
        let mut best_sum = f64::NEG_INFINITY;
        for (ci, row) in values.iter().enumerate() {
            if chosen.contains(&ci) {
                continue;
            }
            let sum: f64 = row.iter().zip(&current_best).map(|(&v, &b)| v.max(b)).sum();
            if sum > best_sum {
                best_sum = sum;
                best_idx = Some(ci);
            }
        }
        let ci = best_idx.expect("candidates remain");
        for (b, &v) in current_best.iter_mut().zip(&values[ci]) {
            *b = b.max(v);
        }
        chosen.push(ci);
    }
    Portfolio::new(chosen.into_iter().map(|i| candidates[i].clone()).collect())
}

/// The four manually recommended configurations.
pub fn baseline_brkga_pap() -> Portfolio {
    let members = vec![
        SolverConfig::new(20, 70, 10, 0.7, false).unwrap(),
        SolverConfig::new(20, 70, 10, 0.7, true).unwrap(),
        SolverConfig::new(15, 75, 10, 0.7, false).unwrap(),
        SolverConfig::new(15, 75, 10, 0.7, true).unwrap(),
    ];
    Portfolio::new(members).expect("baseline members are distinct")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::OneMaxInstance;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn performance_is_max() {
        assert_eq!(portfolio_performance(&[0.3, 0.7]).unwrap(), 0.7);
        assert_eq!(portfolio_performance(&[0.5]).unwrap(), 0.5);
        assert_eq!(portfolio_performance(&[-1.0, -2.0, -3.0]).unwrap(), -1.0);
        assert!(portfolio_performance(&[]).is_err());
    }

    #[test]
    fn adding_a_member_never_hurts() {
        let mut rng = crate::seeds::rng_from(17);
        use rand::Rng;
        for _ in 0..200 {
            let n = rng.random_range(1..6);
            let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let base = portfolio_performance(&vals).unwrap();
            let mut extended = vals.clone();
            extended.push(rng.random_range(-2.0..2.0));
            assert!(portfolio_performance(&extended).unwrap() >= base);
        }
    }

    #[test]
    fn normalization_endpoints() {
        let b = NormBounds::new(-2.0, 6.0, 100).unwrap();
        assert_eq!(normalized_quality(-2.0, &b).unwrap(), 0.0);
        assert_eq!(normalized_quality(6.0, &b).unwrap(), 1.0);
        assert_eq!(normalized_quality(2.0, &b).unwrap(), 0.5);
        assert!(normalized_quality(10.0, &b).unwrap() > 1.0);
    }

    #[test]
    fn degenerate_bounds_error() {
        let b = NormBounds::new(3.0, 3.0, 10).unwrap();
        assert!(matches!(
            normalized_quality(3.0, &b),
            Err(Error::DegenerateInstance(_))
        ));
    }

    #[test]
    fn normalized_quality_is_strictly_increasing() {
        let b = NormBounds::new(0.0, 5.0, 10).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..50 {
            let v = normalized_quality(i as f64 * 0.3 - 2.0, &b).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn bounds_are_exhaustive_for_tiny_spaces() {
        let mut rng = crate::seeds::rng_from(1);
        let inst = OneMaxInstance::random("om4", 4, &mut rng);
        let b = compute_norm_bounds(&inst, 16, 0).unwrap();
        assert_eq!(b.f_min, 0.0);
        assert_eq!(b.f_max, 4.0);
        assert_eq!(b.sample_count, 16);
    }

    #[test]
    fn sampled_bounds_are_seed_deterministic() {
        let mut rng = crate::seeds::rng_from(2);
        let inst = OneMaxInstance::random("om30", 30, &mut rng);
        let a = compute_norm_bounds(&inst, 5000, 7).unwrap();
        let b = compute_norm_bounds(&inst, 5000, 7).unwrap();
        assert_eq!(a, b);
        // Sampled bounds sit inside the true range.
        assert!(a.f_min >= 0.0 && a.f_max <= 30.0 && a.f_max > a.f_min);
    }

    /// Counts objective evaluations; wraps another instance.
    struct Counting<I> {
        inner: I,
        calls: AtomicUsize,
    }

    impl<I: crate::problems::ProblemInstance> crate::problems::ProblemInstance for Counting<I> {
        fn dimension(&self) -> usize {
            self.inner.dimension()
        }
        fn id(&self) -> &str {
            self.inner.id()
        }
        fn evaluate(&self, x: &BitString) -> Result<f64> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.inner.evaluate(x)
        }
    }

    #[test]
    fn evaluation_is_memoized() {
        let mut rng = crate::seeds::rng_from(3);
        let inst = Counting {
            inner: OneMaxInstance::random("om8", 8, &mut rng),
            calls: AtomicUsize::new(0),
        };
        let bounds = compute_norm_bounds(&inst, 256, 0).unwrap();
        inst.calls.store(0, Ordering::Relaxed);
        let cfg = SolverConfig::new(4, 10, 2, 0.7, false).unwrap();
        let cache = PerfCache::new();
        let v1 = evaluate_config_on_instance(&cfg, &inst, &bounds, 64, 2, &cache, 5).unwrap();
        let runs_after_first = inst.calls.load(Ordering::Relaxed);
        assert!(runs_after_first > 0);
        let v2 = evaluate_config_on_instance(&cfg, &inst, &bounds, 64, 2, &cache, 5).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(inst.calls.load(Ordering::Relaxed), runs_after_first);
    }

    #[test]
    fn single_rep_matches_definition() {
        let mut rng = crate::seeds::rng_from(4);
        let inst = OneMaxInstance::random("om8b", 8, &mut rng);
        let bounds = compute_norm_bounds(&inst, 256, 0).unwrap();
        let cfg = SolverConfig::new(4, 10, 2, 0.7, false).unwrap();
        let got = measure_config_on_instance(&cfg, &inst, &bounds, 64, 1, 5).unwrap();
        let seed = seeds::mix(&[
            5,
            seeds::hash_label(&cfg.value_key()),
            seeds::hash_label(inst.id()),
            0,
        ]);
        let run = brkga_run(&cfg, &inst, 64, seed).unwrap();
        assert_eq!(got, normalized_quality(run.best_y, &bounds).unwrap());
    }

    #[test]
    fn generous_budget_reaches_the_sampled_maximum() {
        let mut rng = crate::seeds::rng_from(5);
        let inst = OneMaxInstance::random("om8c", 8, &mut rng);
        // Exhaustive bounds: f_max is the true optimum 8.
        let bounds = compute_norm_bounds(&inst, 256, 0).unwrap();
        let cfg = SolverConfig::new(10, 30, 5, 0.7, false).unwrap();
        let q = measure_config_on_instance(&cfg, &inst, &bounds, 800, 3, 6).unwrap();
        assert!(q >= 1.0 - 1e-12, "quality {q}");
    }

    #[test]
    fn greedy_prefers_complementary_members() {
        let a = SolverConfig::new(1, 1, 1, 0.1, false).unwrap();
        let b = SolverConfig::new(2, 2, 2, 0.2, false).unwrap();
        let cache = PerfCache::new();
        let ids = vec!["m0".to_string(), "m1".to_string()];
        for (cfg, vals) in [(&a, [0.9, 0.2]), (&b, [0.5, 0.5])] {
            for (id, v) in ids.iter().zip(vals) {
                cache.insert_if_absent(
                    cfg,
                    id,
                    CacheEntry {
                        quality: v,
                        replications: 1,
                    },
                );
            }
        }
        let p = greedy_initialize(&[a.clone(), b.clone()], &ids, 2, &cache).unwrap();
        // a first (sum 1.1 beats 1.0), then b (union 1.4).
        assert_eq!(p.members()[0], a);
        assert_eq!(p.members()[1], b);

        let single = greedy_initialize(&[a.clone(), b.clone()], &ids, 1, &cache).unwrap();
        assert_eq!(single.members(), std::slice::from_ref(&a));

        let full = greedy_initialize(&[a, b], &ids, 2, &cache).unwrap();
        assert_eq!(full.len(), 2);
    }

    #[test]
    fn greedy_first_pick_dominates_every_instance() {
        use rand::Rng;
        for seed in 0..20u64 {
            let mut rng = crate::seeds::rng_from(seeds::mix(&[61, seed]));
            let n_configs = rng.random_range(3..8);
            let n_instances = rng.random_range(2..5);
            let candidates: Vec<SolverConfig> = (0..n_configs)
                .map(|i| SolverConfig::new(i + 1, i + 2, 1, 0.5, false).unwrap())
                .collect();
            let ids: Vec<String> = (0..n_instances).map(|i| format!("m{i}")).collect();
            let cache = PerfCache::new();
            for c in &candidates {
                for m in &ids {
                    cache.insert_if_absent(
                        c,
                        m,
                        CacheEntry {
                            quality: rng.random_range(0.0..1.0),
                            replications: 1,
                        },
                    );
                }
            }
            let k = rng.random_range(1..=n_configs as usize);
            let p = greedy_initialize(&candidates, &ids, k, &cache).unwrap();
            // The best single configuration by summed quality is picked
            // first, so the portfolio dominates it on every instance.
            let best_single = candidates
                .iter()
                .max_by(|a, b| {
                    let sa: f64 = ids.iter().map(|m| cache.get_required(a, m).unwrap()).sum();
                    let sb: f64 = ids.iter().map(|m| cache.get_required(b, m).unwrap()).sum();
                    sa.partial_cmp(&sb).unwrap()
                })
                .unwrap();
            for m in &ids {
                let pv = p
                    .members()
                    .iter()
                    .map(|c| cache.get_required(c, m).unwrap())
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(pv >= cache.get_required(best_single, m).unwrap() - 1e-12);
            }
        }
    }

    #[test]
    fn greedy_requires_enough_candidates() {
        let a = SolverConfig::new(1, 1, 1, 0.1, false).unwrap();
        let cache = PerfCache::new();
        assert!(matches!(
            greedy_initialize(&[a], &["m".to_string()], 2, &cache),
            Err(Error::NotEnoughCandidates { .. })
        ));
    }

    #[test]
    fn baseline_matches_published_members() {
        let p = baseline_brkga_pap();
        assert_eq!(p.len(), 4);
        let third = &p.members()[2];
        assert_eq!(
            (third.elite_size, third.offspring_size, third.mutant_size),
            (15, 75, 10)
        );
        assert_eq!(third.elite_bias, 0.7);
        assert!(!third.eliminate_duplicates);
        for m in p.members() {
            m.validate().unwrap();
        }
    }

    #[test]
    fn cache_round_trips_through_json() {
        let cache = PerfCache::new();
        let cfg = SolverConfig::new(20, 70, 10, 0.7, false).unwrap();
        cache.insert_if_absent(
            &cfg,
            "inst-a",
            CacheEntry {
                quality: 0.875,
                replications: 3,
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        cache.save_json(&path).unwrap();
        let loaded = PerfCache::load_json(&path).unwrap();
        assert_eq!(loaded.get(&cfg, "inst-a").unwrap().quality, 0.875);
        assert_eq!(loaded.len(), 1);
    }

    #[test]
    fn first_cache_write_wins() {
        let cache = PerfCache::new();
        let cfg = SolverConfig::new(20, 70, 10, 0.7, false).unwrap();
        let first = cache.insert_if_absent(
            &cfg,
            "m",
            CacheEntry {
                quality: 0.5,
                replications: 1,
            },
        );
        let second = cache.insert_if_absent(
            &cfg,
            "m",
            CacheEntry {
                quality: 0.9,
                replications: 1,
            },
        );
        assert_eq!(first.quality, 0.5);
        assert_eq!(second.quality, 0.5);
    }
}
