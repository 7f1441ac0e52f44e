use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_dimension, BitString, Graph, ProblemInstance};
use crate::error::{Error, Result};
use crate::seeds;

/// Repair a seed-set solution against the cardinality budget: if more than
/// `k` bits are set, keep only the first `k` in index order.
pub fn repair_seed_set(x: &BitString, k: usize) -> BitString {
    if x.popcount() <= k {
        return x.clone();
    }
    let mut kept = 0;
    let bits = x
        .bits()
        .iter()
        .map(|&b| {
            if b == 1 && kept < k {
                kept += 1;
                1
            } else {
                0
            }
        })
        .collect();
    BitString::from_bits(bits).expect("repair produces valid bits")
}

/// Adoption-probability parameters of the two competing opinions.
///
/// A node informed of opinion B adopts it with probability `q_b_none` if it
/// has not adopted A, and `q_b_given_a` if it has (symmetrically for A).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ComicParams {
    pub q_a_none: f64,
    pub q_a_given_b: f64,
    pub q_b_none: f64,
    pub q_b_given_a: f64,
}

impl ComicParams {
    /// The two published default settings.
    pub fn high_complement() -> Self {
        Self {
            q_a_none: 0.5,
            q_a_given_b: 0.75,
            q_b_none: 0.5,
            q_b_given_a: 0.75,
        }
    }

    pub fn low_complement() -> Self {
        Self {
            q_a_none: 0.5,
            q_a_given_b: 0.25,
            q_b_none: 0.5,
            q_b_given_a: 0.25,
        }
    }
}

/// Complementary influence maximization instance: choose at most `k` seed
/// nodes for opinion B from a fixed candidate list so that the expected
/// number of B-adopting nodes under the cascade process is maximized, in the
/// presence of a pre-seeded complementary opinion A.
///
/// The diffusion is an independent-cascade variant: each edge `(u, v)`
/// activates with probability `p(u, v)` (drawn once per replication), and an
/// informed node adopts via the `ComicParams` probabilities. Within a round,
/// A informings are processed before B informings in node-index order. The
/// cited model's full tie-breaking order is not reproduced; this is a
/// documented approximation.
#[derive(Clone)]
pub struct ComicInstance {
    id: String,
    graph: Arc<Graph>,
    seed_a: Vec<usize>,
    candidates: Vec<usize>,
    params: ComicParams,
    k: usize,
    replications: usize,
    scenario_seed: u64,
}

impl ComicInstance {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        graph: Arc<Graph>,
        seed_a_ids: &[u64],
        candidate_ids: &[u64],
        params: ComicParams,
        k: usize,
        replications: usize,
        scenario_seed: u64,
    ) -> Result<Self> {
        let resolve = |ids: &[u64]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|&id| {
                    graph
                        .index_of(id)
                        .ok_or_else(|| Error::Graph(format!("node {id} not in graph")))
                })
                .collect()
        };
        let seed_a = resolve(seed_a_ids)?;
        let candidates = resolve(candidate_ids)?;
        if k > candidates.len() {
            return Err(Error::Config(format!(
                "seed budget k={k} exceeds candidate count {}",
                candidates.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            graph,
            seed_a,
            candidates,
            params,
            k,
            replications,
            scenario_seed,
        })
    }

    /// Sample an instance from a graph: random candidate list of size `dim`,
    /// one of the two default parameter settings, and `k` drawn from
    /// `[0.2 dim, 0.6 dim]`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample<R: Rng + ?Sized>(
        id: impl Into<String>,
        graph: Arc<Graph>,
        dim: usize,
        seed_a_count: usize,
        replications: usize,
        scenario_seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        use rand::seq::SliceRandom;
        let mut ids: Vec<u64> = graph.node_ids().to_vec();
        ids.shuffle(rng);
        if ids.len() < dim + seed_a_count {
            return Err(Error::Graph(format!(
                "graph has {} nodes, need {}",
                ids.len(),
                dim + seed_a_count
            )));
        }
        let candidates: Vec<u64> = ids[..dim].to_vec();
        let seed_a: Vec<u64> = ids[dim..dim + seed_a_count].to_vec();
        let params = if rng.random_bool(0.5) {
            ComicParams::high_complement()
        } else {
            ComicParams::low_complement()
        };
        let lo = (0.2 * dim as f64).round() as usize;
        let hi = (0.6 * dim as f64).round() as usize;
        let k = rng.random_range(lo.max(1)..=hi.max(1));
        Self::new(
            id,
            graph,
            &seed_a,
            &candidates,
            params,
            k,
            replications,
            scenario_seed,
        )
    }

    pub fn seed_budget(&self) -> usize {
        self.k
    }

    /// One diffusion replication; thresholds are drawn up-front in a fixed
    /// order so results do not depend on traversal order.
    fn diffuse_once(&self, seed_b: &[usize], rep: usize) -> usize {
        let g = &*self.graph;
        let n = g.node_count();
        let mut rng = seeds::rng_from(seeds::mix(&[
            self.scenario_seed,
            seeds::hash_label("comic-rep"),
            rep as u64,
        ]));
        let edges = g.edges_ordered();
        let live: Vec<bool> = edges
            .iter()
            .map(|&(_, _, p)| rng.random::<f64>() < p)
            .collect();
        let thr_a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let thr_b: Vec<f64> = (0..n).map(|_| rng.random()).collect();

        // Live out-adjacency for this replication.
        let mut live_out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, &(u, v, _)) in edges.iter().enumerate() {
            if live[i] {
                live_out[u].push(v);
            }
        }

        let mut adopted_a = vec![false; n];
        let mut adopted_b = vec![false; n];
        let mut informed_a = vec![false; n];
        let mut informed_b = vec![false; n];

        let mut frontier_a: Vec<usize> = self.seed_a.clone();
        let mut frontier_b: Vec<usize> = seed_b.to_vec();
        frontier_a.sort_unstable();
        frontier_b.sort_unstable();

        while !frontier_a.is_empty() || !frontier_b.is_empty() {
            let mut next_a = Vec::new();
            let mut next_b = Vec::new();
            for &node in &frontier_a {
                if informed_a[node] {
                    continue;
                }
                informed_a[node] = true;
                let q = if adopted_b[node] {
                    self.params.q_a_given_b
                } else {
                    self.params.q_a_none
                };
                if thr_a[node] < q {
                    adopted_a[node] = true;
                    next_a.extend(live_out[node].iter().copied());
                }
            }
            for &node in &frontier_b {
                if informed_b[node] {
                    continue;
                }
                informed_b[node] = true;
                let q = if adopted_a[node] {
                    self.params.q_b_given_a
                } else {
                    self.params.q_b_none
                };
                if thr_b[node] < q {
                    adopted_b[node] = true;
                    next_b.extend(live_out[node].iter().copied());
                }
            }
            next_a.sort_unstable();
            next_a.dedup();
            next_b.sort_unstable();
            next_b.dedup();
            frontier_a = next_a;
            frontier_b = next_b;
        }
        adopted_b.iter().filter(|&&a| a).count()
    }
}

/// Mean B-spread of the repaired solution; exposed so callers can confirm
/// repair-invariance directly.
pub fn comic_repaired(instance: &ComicInstance, x: &BitString) -> BitString {
    repair_seed_set(x, instance.k)
}

impl ProblemInstance for ComicInstance {
    fn dimension(&self) -> usize {
        self.candidates.len()
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn evaluate(&self, x: &BitString) -> Result<f64> {
        check_dimension(self.candidates.len(), x)?;
        let repaired = repair_seed_set(x, self.k);
        let seed_b: Vec<usize> = repaired
            .bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| self.candidates[i])
            .collect();
        let total: usize = (0..self.replications)
            .map(|rep| self.diffuse_once(&seed_b, rep))
            .sum();
        Ok(total as f64 / self.replications as f64)
    }
}
