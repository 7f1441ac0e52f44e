//! Landscape analysis and verification tooling: fitness-distance
//! neighborhood features, PCA projection to 2D, the closest-instance
//! recovery protocol for OneMax surrogates, and report emission from a run
//! directory.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brkga::{brkga_run, SolverConfig};
use crate::coevolution::PapCheckpoint;
use crate::error::{Error, Result};
use crate::problems::{BitString, ProblemInstance};
use crate::seeds;

/// 32-dimensional neighborhood signature: 16 per-distance-quantile means of
/// absolute normalized objective differences, then their 16 standard
/// deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn means(&self) -> &[f64] {
        &self.values[..16]
    }

    pub fn deviations(&self) -> &[f64] {
        &self.values[16..]
    }
}

/// 1-indexed quantile rank into `m` distance classes: clamp(floor(a_i * m),
/// 1, m) with a_i = i / 15.
pub fn quantile_rank(i: usize, m: usize) -> usize {
    let a = i as f64 / 15.0;
    ((a * m as f64).floor() as usize).clamp(1, m)
}

/// Extract the neighborhood feature vector of an instance: sample solutions,
/// normalize their objectives over the sample, sample solution pairs, group
/// absolute objective differences by Hamming distance, and read 16 quantile
/// classes (largest distance first) of means and standard deviations.
pub fn extract_features(
    instance: &dyn ProblemInstance,
    n_solutions: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<FeatureVector> {
    assert!(n_solutions >= 2 && n_pairs >= 1);
    let dim = instance.dimension();

    // Sampled solutions, packed for fast pair distances.
    type SampledChunk = (Vec<Vec<u64>>, Vec<f64>);
    const CHUNK: usize = 4096;
    let chunk_count = n_solutions.div_ceil(CHUNK);
    let sampled: Vec<Result<SampledChunk>> = (0..chunk_count)
        .into_par_iter()
        .map(|ci| {
            let count = CHUNK.min(n_solutions - ci * CHUNK);
            let mut rng = seeds::rng_from(seeds::mix(&[
                seed,
                seeds::hash_label("fd-solutions"),
                ci as u64,
            ]));
            let xs: Vec<BitString> = (0..count)
                .map(|_| BitString::random(dim, &mut rng))
                .collect();
            let ys = instance.evaluate_batch(&xs)?;
            Ok((xs.iter().map(BitString::pack_words).collect(), ys))
        })
        .collect();
    let mut words: Vec<Vec<u64>> = Vec::with_capacity(n_solutions);
    let mut ys: Vec<f64> = Vec::with_capacity(n_solutions);
    for chunk in sampled {
        let (w, y) = chunk?;
        words.extend(w);
        ys.extend(y);
    }
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::DegenerateInstance(instance.id().to_string()));
    }
    let ys: Vec<f64> = ys.iter().map(|y| (y - lo) / (hi - lo)).collect();

    // Pair statistics per Hamming distance: (count, sum, sum of squares).
    let pair_chunks = n_pairs.div_ceil(CHUNK);
    let partials: Vec<Vec<(u64, f64, f64)>> = (0..pair_chunks)
        .into_par_iter()
        .map(|ci| {
            let count = CHUNK.min(n_pairs - ci * CHUNK);
            let mut rng = seeds::rng_from(seeds::mix(&[
                seed,
                seeds::hash_label("fd-pairs"),
                ci as u64,
            ]));
            let mut acc = vec![(0u64, 0.0f64, 0.0f64); dim + 1];
            for _ in 0..count {
                use rand::Rng;
                let a = rng.random_range(0..n_solutions);
                let mut b = rng.random_range(0..n_solutions - 1);
                if b >= a {
                    b += 1;
                }
                let d: u32 = words[a]
                    .iter()
                    .zip(&words[b])
                    .map(|(x, y)| (x ^ y).count_ones())
                    .sum();
                let dy = (ys[a] - ys[b]).abs();
                let slot = &mut acc[d as usize];
                slot.0 += 1;
                slot.1 += dy;
                slot.2 += dy * dy;
            }
            acc
        })
        .collect();
    let mut acc = vec![(0u64, 0.0f64, 0.0f64); dim + 1];
    for partial in partials {
        for (slot, p) in acc.iter_mut().zip(partial) {
            slot.0 += p.0;
            slot.1 += p.1;
            slot.2 += p.2;
        }
    }

    // Distance classes present in the sample, largest distance first. The
    // outermost observed distances are extreme order statistics holding a
    // handful of pairs however many are drawn; their raw means would be
    // lattice noise, so sparse boundary classes are merged inward until
    // each end of the ladder rests on a minimally populated class.
    const MIN_CLASS_PAIRS: u64 = 100;
    let mut classes: Vec<(u64, f64, f64)> = (0..=dim)
        .rev()
        .filter_map(|d| {
            let (n, s, s2) = acc[d];
            (n > 0).then_some((n, s, s2))
        })
        .collect();
    let merge_into = |classes: &mut Vec<(u64, f64, f64)>, from: usize, to: usize| {
        let (n, s, s2) = classes[from];
        classes[to].0 += n;
        classes[to].1 += s;
        classes[to].2 += s2;
        classes.remove(from);
    };
    while classes.len() > 2 && classes[0].0 < MIN_CLASS_PAIRS {
        merge_into(&mut classes, 0, 1);
    }
    while classes.len() > 2 && classes[classes.len() - 1].0 < MIN_CLASS_PAIRS {
        let last = classes.len() - 1;
        merge_into(&mut classes, last, last - 1);
    }
    let m = classes.len();
    if m < 2 {
        return Err(Error::DegenerateInstance(format!(
            "{}: only {m} distinct pair distances sampled",
            instance.id()
        )));
    }

    let mut means = Vec::with_capacity(16);
    let mut devs = Vec::with_capacity(16);
    for i in 0..16 {
        let (n, s, s2) = classes[quantile_rank(i, m) - 1];
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        means.push(mean);
        devs.push(var.sqrt());
    }
    let mut values = means;
    values.extend(devs);
    Ok(FeatureVector { values })
}

/// 2D PCA projection fitted on one set and applied to another.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcaProjection {
    pub coords: Vec<[f64; 2]>,
    pub explained: [f64; 2],
    pub total_variance: f64,
}

/// Center on the fit set's mean, take the top two principal directions of
/// its covariance, and project every vector of `all` with that mapping.
#[allow(clippy::needless_range_loop)]
pub fn fit_project_pca(fit_set: &[FeatureVector], all: &[FeatureVector]) -> Result<PcaProjection> {
    if fit_set.len() < 3 {
        return Err(Error::Config(format!(
            "PCA needs at least 3 fit vectors, got {}",
            fit_set.len()
        )));
    }
    let dim = fit_set[0].values.len();
    for v in fit_set.iter().chain(all) {
        if v.values.len() != dim {
            return Err(Error::Shape("feature vectors of unequal length".into()));
        }
    }
    let n = fit_set.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for v in fit_set {
        for (m, &x) in mean.iter_mut().zip(&v.values) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    // Covariance with 1/(n-1) normalization.
    let mut cov = vec![vec![0.0f64; dim]; dim];
    for v in fit_set {
        let centered: Vec<f64> = v.values.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..dim {
            for j in i..dim {
                cov[i][j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            cov[i][j] /= n - 1.0;
            cov[j][i] = cov[i][j];
        }
    }
    let total_variance: f64 = (0..dim).map(|i| cov[i][i]).sum();

    let (eigenvalues, eigenvectors) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());
    let (first, second) = (order[0], order[1]);
    if eigenvalues[second] <= total_variance.max(1.0) * 1e-12 {
        return Err(Error::DegenerateInstance(
            "feature covariance has rank below 2".into(),
        ));
    }
    let mut axes = [vec![0.0; dim], vec![0.0; dim]];
    for (axis, &col) in axes.iter_mut().zip([first, second].iter()) {
        for i in 0..dim {
            axis[i] = eigenvectors[i][col];
        }
        // Stable sign: the largest-magnitude component points up.
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if axis[lead] < 0.0 {
            for a in axis.iter_mut() {
                *a = -*a;
            }
        }
    }

    let coords = all
        .iter()
        .map(|v| {
            let centered: Vec<f64> = v.values.iter().zip(&mean).map(|(x, m)| x - m).collect();
            [
                centered.iter().zip(&axes[0]).map(|(a, b)| a * b).sum(),
                centered.iter().zip(&axes[1]).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();
    Ok(PcaProjection {
        coords,
        explained: [eigenvalues[first], eigenvalues[second]],
        total_variance,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// (eigenvalues, column eigenvectors).
#[allow(clippy::needless_range_loop)]
fn jacobi_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v = vec![vec![0.0f64; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = matrix
        .iter()
        .flat_map(|r| r.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() < 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Result of the closest-instance search.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub target: BitString,
    pub l1: f64,
    pub l2: f64,
}

/// Scorer predictions normalized by frozen bounds. Bounds come from one
/// reference sample and are reused for every later set, so columns from
/// different sets stay on a common scale.
fn scored_with_bounds(
    scorer: &dyn ProblemInstance,
    xs: &[BitString],
    bounds: Option<(f64, f64)>,
) -> Result<(Vec<f64>, (f64, f64))> {
    let raw = scorer.evaluate_batch(xs)?;
    let (lo, hi) = bounds.unwrap_or_else(|| {
        (
            raw.iter().copied().fold(f64::INFINITY, f64::min),
            raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    });
    if hi <= lo {
        return Err(Error::DegenerateInstance(scorer.id().to_string()));
    }
    Ok((raw.iter().map(|y| (y - lo) / (hi - lo)).collect(), (lo, hi)))
}

/// Packed solution set with per-solution popcounts for fast target-string
/// objective evaluation.
struct PackedSet {
    words: Vec<Vec<u64>>,
    dim: usize,
}

impl PackedSet {
    fn sample(dim: usize, count: usize, seed: u64) -> (Vec<BitString>, Self) {
        let mut rng = seeds::rng_from(seed);
        let xs: Vec<BitString> = (0..count)
            .map(|_| BitString::random(dim, &mut rng))
            .collect();
        let words = xs.iter().map(BitString::pack_words).collect();
        (xs, Self { words, dim })
    }

    fn raw_objective(&self, target: &BitString) -> Vec<f64> {
        let t_words = target.pack_words();
        self.words
            .iter()
            .map(|w| {
                let h: u32 = w
                    .iter()
                    .zip(&t_words)
                    .map(|(a, b)| (a ^ b).count_ones())
                    .sum();
                (self.dim as u32 - h) as f64
            })
            .collect()
    }

    /// Min/max of the candidate target's objective over this set; the
    /// frozen normalization bounds of the candidate instance.
    fn objective_bounds(&self, target: &BitString) -> (f64, f64) {
        let raw = self.raw_objective(target);
        (
            raw.iter().copied().fold(f64::INFINITY, f64::min),
            raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }

    /// MSE between the candidate target's normalized objective column and a
    /// reference column, under explicit normalization bounds.
    fn mse_with_bounds(&self, target: &BitString, bounds: (f64, f64), reference: &[f64]) -> f64 {
        let (lo, hi) = bounds;
        let raw = self.raw_objective(target);
        if hi <= lo {
            // A constant column cannot happen for non-trivial sets, but
            // guard the division anyway.
            return reference.iter().map(|b| b * b).sum::<f64>() / reference.len() as f64;
        }
        raw.iter()
            .zip(reference)
            .map(|(y, b)| {
                let a = (y - lo) / (hi - lo);
                (a - b) * (a - b)
            })
            .sum::<f64>()
            / reference.len() as f64
    }

    /// MSE with bounds taken from this set itself.
    fn mse_against(&self, target: &BitString, reference: &[f64]) -> f64 {
        self.mse_with_bounds(target, self.objective_bounds(target), reference)
    }
}

/// Inner search problem: maximize the negated mean squared error between
/// the candidate target's normalized objective column and the scorer's
/// normalized predictions.
struct RecoverySearch<'a> {
    set: &'a PackedSet,
    reference: &'a [f64],
}

impl ProblemInstance for RecoverySearch<'_> {
    fn dimension(&self) -> usize {
        self.set.dim
    }

    fn id(&self) -> &str {
        "closest-instance-search"
    }

    fn evaluate(&self, x: &BitString) -> Result<f64> {
        Ok(-self.set.mse_against(x, self.reference))
    }
}

/// Sample sizes of the recovery protocol.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RecoveryScale {
    pub search_set: usize,
    pub validation_set: usize,
}

impl Default for RecoveryScale {
    fn default() -> Self {
        Self {
            search_set: 100_000,
            validation_set: 500_000,
        }
    }
}

/// Find the distance-to-target instance closest to a scorer: score a random
/// search set, search the target string minimizing the normalized-score MSE
/// with the standard solver under `fes` evaluations, and validate the
/// winner on a larger fresh set.
pub fn recover_closest_onemax(
    scorer: &dyn ProblemInstance,
    fes: usize,
    seed: u64,
    scale: RecoveryScale,
) -> Result<RecoveryResult> {
    assert!(fes >= 1);
    let dim = scorer.dimension();
    let (x1, packed1) = PackedSet::sample(
        dim,
        scale.search_set,
        seeds::mix(&[seed, seeds::hash_label("recovery-x1")]),
    );
    let (y1_pred, pred_bounds) = scored_with_bounds(scorer, &x1, None)?;
    drop(x1);

    let search = RecoverySearch {
        set: &packed1,
        reference: &y1_pred,
    };
    let config = SolverConfig::new(20, 70, 10, 0.7, false).unwrap();
    let run = brkga_run(
        &config,
        &search,
        fes,
        seeds::mix(&[seed, seeds::hash_label("recovery-search")]),
    )?;
    let target = run.best_x;
    let target_bounds = packed1.objective_bounds(&target);
    let l1 = packed1.mse_with_bounds(&target, target_bounds, &y1_pred);

    // Validation reuses the frozen normalization bounds of both sides, so
    // it measures the same functional distance on fresh data.
    let (x2, packed2) = PackedSet::sample(
        dim,
        scale.validation_set,
        seeds::mix(&[seed, seeds::hash_label("recovery-x2")]),
    );
    let (y2_pred, _) = scored_with_bounds(scorer, &x2, Some(pred_bounds))?;
    drop(x2);
    let l2 = packed2.mse_with_bounds(&target, target_bounds, &y2_pred);

    Ok(RecoveryResult { target, l1, l2 })
}

/// Machine-readable summary emitted next to the CSV files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportSummary {
    pub rounds: Vec<usize>,
    pub final_objective: f64,
    pub per_round_objective: BTreeMap<String, f64>,
    pub instances_seen: usize,
    pub has_feature_coords: bool,
}

/// Feature/projection record consumed by the report emitter; written by the
/// feature-extraction pipeline as `features.json` inside an output
/// directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub instance_id: String,
    pub group: String,
    pub vector: FeatureVector,
    pub coords: Option<[f64; 2]>,
}

/// Emit per-instance quality and per-round objective CSV files plus a JSON
/// summary from a completed run directory; includes 2D feature coordinates
/// when a `features.json` is present. Output is byte-stable across
/// re-emissions.
pub fn emit_report(run_dir: &Path, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut rounds: Vec<(usize, PapCheckpoint)> = Vec::new();
    for entry in std::fs::read_dir(run_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(idx) = name.strip_prefix("round_") {
            if let Ok(round) = idx.parse::<usize>() {
                let pap_path = entry.path().join("pap.json");
                if pap_path.exists() {
                    let pap: PapCheckpoint =
                        serde_json::from_str(&std::fs::read_to_string(&pap_path)?)?;
                    rounds.push((round, pap));
                }
            }
        }
    }
    if rounds.is_empty() {
        return Err(Error::Checkpoint(format!(
            "no round checkpoints under {}",
            run_dir.display()
        )));
    }
    rounds.sort_by_key(|(r, _)| *r);

    let mut qualities = String::from("round,instance_id,quality\n");
    let mut objectives = String::from("round,objective,psi_size,subsets_visited,pool_size\n");
    let mut instances = std::collections::BTreeSet::new();
    let mut per_round_objective = BTreeMap::new();
    for (round, pap) in &rounds {
        for (id, q) in &pap.per_instance {
            qualities.push_str(&format!("{round},{id},{q}\n"));
            instances.insert(id.clone());
        }
        objectives.push_str(&format!(
            "{round},{},{},{},{}\n",
            pap.objective,
            pap.psi_size,
            pap.subsets_visited,
            pap.per_instance.len()
        ));
        per_round_objective.insert(round.to_string(), pap.objective);
    }
    std::fs::write(out_dir.join("instance_quality.csv"), qualities)?;
    std::fs::write(out_dir.join("round_objectives.csv"), objectives)?;

    let features_path = run_dir.join("features.json");
    let has_feature_coords = features_path.exists();
    if has_feature_coords {
        let records: Vec<FeatureRecord> =
            serde_json::from_str(&std::fs::read_to_string(&features_path)?)?;
        let mut coords = String::from("instance_id,group,x,y\n");
        for r in &records {
            if let Some([x, y]) = r.coords {
                coords.push_str(&format!("{},{},{x},{y}\n", r.instance_id, r.group));
            }
        }
        std::fs::write(out_dir.join("feature_coords.csv"), coords)?;
    }

    let summary = ReportSummary {
        rounds: rounds.iter().map(|(r, _)| *r).collect(),
        final_objective: rounds.last().unwrap().1.objective,
        per_round_objective,
        instances_seen: instances.len(),
        has_feature_coords,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}
