//! Implementations of the CLI subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use papforge::analysis::{
    emit_report, extract_features, fit_project_pca, recover_closest_onemax, FeatureRecord,
    FeatureVector, RecoveryResult, RecoveryScale,
};
use papforge::brkga::brkga_run;
use papforge::coevolution::{
    read_nir_pool, run_ceps_baseline, run_dace, Phase, PoolEntry, RunPaths, RunState,
};
use papforge::error::Error as CoreError;
use papforge::nir::{
    load_checkpoint, sample_training_data, save_checkpoint, train_nirs, Nir, NirArch, NirHyper,
};
use papforge::portfolio::{baseline_brkga_pap, compute_norm_bounds, normalized_quality, Portfolio};
use papforge::problems::{ccp_domain_mutate, CcpInstance, ProblemInstance};
use papforge::seeds;

use crate::manifest::{build_problem, BuiltInstance, Manifest, Scale};
use crate::{log_line, PapSource};

/// Refuse to clobber a completed artifact unless forced; with force the
/// whole directory is removed.
fn guard_completed(dir: &Path, marker: &Path, force: bool) -> Result<()> {
    if marker.exists() {
        if !force {
            bail!(
                "{} already contains completed output ({}); pass --force to overwrite",
                dir.display(),
                marker.display()
            );
        }
        std::fs::remove_dir_all(dir).with_context(|| format!("cannot clear {}", dir.display()))?;
    }
    Ok(())
}

fn run_state(dir: &Path) -> Option<RunState> {
    let text = std::fs::read_to_string(RunPaths::new(dir).state_json()).ok()?;
    serde_json::from_str(&text).ok()
}

fn instances_of(built: &[BuiltInstance]) -> Vec<Arc<dyn ProblemInstance>> {
    built.iter().map(|b| b.instance.clone()).collect()
}

pub fn nir_train(manifest: &Manifest, scale: Scale, out: &Path, force: bool) -> Result<()> {
    guard_completed(out, &out.join("manifest.json"), force)?;
    std::fs::create_dir_all(out)?;
    let problem = build_problem(manifest)?;
    if problem.train.is_empty() {
        bail!("no training instances");
    }
    let cfg = manifest.run.to_config(scale, manifest.seed);
    let train = instances_of(&problem.train);
    let d_model = papforge::coevolution::model_dimension(&train);
    log_line(
        "info",
        &format!("sampling training data for {} instances", train.len()),
    );
    let data: Vec<_> = train
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            sample_training_data(
                inst.as_ref(),
                cfg.training_samples,
                seeds::stream(cfg.seed, "training-data", i as u64),
            )
        })
        .collect::<papforge::Result<_>>()?;
    let arch = NirArch::standard(d_model);
    log_line("info", &format!("training surrogates (d_model={d_model})"));
    let (shared, embeddings, report) = train_nirs(
        &arch,
        &data,
        &cfg.nir_hyper,
        seeds::stream(cfg.seed, "nir-train", 0),
    )?;
    let shared = Arc::new(shared);
    let nirs: Vec<Nir> = embeddings
        .into_iter()
        .zip(&train)
        .map(|(e, inst)| Nir::new(shared.clone(), e, format!("nir:{}", inst.id())))
        .collect();
    save_checkpoint(out, &shared, &nirs, &cfg.nir_hyper, &report)?;
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    log_line(
        "info",
        &format!(
            "trained {} surrogates in {} epochs; checkpoint at {}",
            nirs.len(),
            report.epochs_run,
            out.display()
        ),
    );
    Ok(())
}

pub fn dace_run(manifest: &Manifest, scale: Scale, out: &Path, force: bool) -> Result<()> {
    if force && out.exists() {
        std::fs::remove_dir_all(out)?;
    } else if matches!(
        run_state(out),
        Some(RunState {
            phase: Phase::Finished,
            ..
        })
    ) {
        bail!(
            "{} holds a finished run; pass --force to redo it",
            out.display()
        );
    }
    let problem = build_problem(manifest)?;
    if problem.train.is_empty() {
        bail!("no training instances");
    }
    let cfg = manifest.run.to_config(scale, manifest.seed);
    let outcome = run_dace(&instances_of(&problem.train), &cfg, out)?;
    log_line(
        "info",
        &format!(
            "portfolio of {} members, pool objective {:.4}, artifacts at {}",
            outcome.portfolio.len(),
            outcome.objective,
            out.display()
        ),
    );
    Ok(())
}

pub fn ceps_run(manifest: &Manifest, scale: Scale, out: &Path, force: bool) -> Result<()> {
    if force && out.exists() {
        std::fs::remove_dir_all(out)?;
    } else if matches!(
        run_state(out),
        Some(RunState {
            phase: Phase::Finished,
            ..
        })
    ) {
        bail!(
            "{} holds a finished run; pass --force to redo it",
            out.display()
        );
    }
    let problem = build_problem(manifest)?;
    if !problem.is_ccp {
        bail!("the baseline mode ships a domain generator for the contamination class only");
    }
    let cfg = manifest.run.to_config(scale, manifest.seed);
    let train = instances_of(&problem.train);

    // Registry of concrete instances backing the type-erased pool.
    let registry: std::sync::Mutex<BTreeMap<String, CcpInstance>> = std::sync::Mutex::new(
        problem
            .train
            .iter()
            .map(|b| {
                let inst: CcpInstance =
                    serde_json::from_value(b.payload.clone().expect("ccp payload"))
                        .expect("ccp payload decodes");
                (b.instance.id().to_string(), inst)
            })
            .collect(),
    );
    let mut mutate = |parent: &Arc<dyn ProblemInstance>,
                      child_id: &str,
                      seed: u64|
     -> papforge::Result<Arc<dyn ProblemInstance>> {
        let mut registry = registry.lock().expect("registry lock");
        let parent_ccp = registry
            .get(parent.id())
            .ok_or_else(|| CoreError::Config(format!("unregistered parent {}", parent.id())))?
            .clone();
        let mut rng = seeds::rng_from(seed);
        let child = ccp_domain_mutate(&parent_ccp, child_id, &mut rng);
        registry.insert(child_id.to_string(), child.clone());
        Ok(Arc::new(child))
    };
    let payload = |inst: &Arc<dyn ProblemInstance>| -> papforge::Result<serde_json::Value> {
        let registry = registry.lock().expect("registry lock");
        let ccp = registry
            .get(inst.id())
            .ok_or_else(|| CoreError::Config(format!("unregistered instance {}", inst.id())))?;
        serde_json::to_value(ccp).map_err(CoreError::from)
    };
    let outcome = run_ceps_baseline(&train, &cfg, out, &mut mutate, &payload)?;
    log_line(
        "info",
        &format!(
            "baseline portfolio of {} members, pool objective {:.4}",
            outcome.portfolio.len(),
            outcome.objective
        ),
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationRow {
    instance_id: String,
    dimension: usize,
    quality: f64,
}

#[derive(Serialize)]
struct EvaluationSummary {
    portfolio_members: usize,
    repetitions: usize,
    mean_quality: f64,
    per_dimension: BTreeMap<usize, f64>,
    rows: Vec<EvaluationRow>,
}

/// Apply a portfolio to an instance the protocol way: every member runs
/// once per repetition, the best member result is normalized, and the mean
/// over repetitions is the portfolio's quality on that instance.
pub fn apply_portfolio(
    portfolio: &Portfolio,
    instance: &dyn ProblemInstance,
    norm_samples: usize,
    budget: usize,
    repetitions: usize,
    seed: u64,
) -> papforge::Result<f64> {
    let bounds = compute_norm_bounds(
        instance,
        norm_samples,
        seeds::mix(&[
            seed,
            seeds::hash_label("eval-bounds"),
            seeds::hash_label(instance.id()),
        ]),
    )?;
    let mut total = 0.0;
    for rep in 0..repetitions {
        let mut best: Option<f64> = None;
        for (mi, member) in portfolio.members().iter().enumerate() {
            let run_seed = seeds::mix(&[
                seed,
                seeds::hash_label(instance.id()),
                rep as u64,
                mi as u64,
            ]);
            match brkga_run(member, instance, budget, run_seed) {
                Ok(run) => {
                    let q = normalized_quality(run.best_y, &bounds)?;
                    best = Some(best.map_or(q, |b: f64| b.max(q)));
                }
                // Members that cannot start within the budget contribute
                // nothing to the parallel portfolio.
                Err(CoreError::BudgetTooSmall { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        total += best.ok_or(CoreError::EmptyPortfolio)?;
    }
    Ok(total / repetitions as f64)
}

pub fn evaluate(
    manifest: &Manifest,
    scale: Scale,
    source: &PapSource,
    out: &Path,
    force: bool,
) -> Result<()> {
    guard_completed(out, &out.join("evaluation.json"), force)?;
    std::fs::create_dir_all(out)?;
    let problem = build_problem(manifest)?;
    if problem.test.is_empty() {
        bail!("manifest has no test instances");
    }
    let portfolio = load_portfolio(source)?;
    let cfg = manifest.run.to_config(scale, manifest.seed);
    let repetitions = manifest.run.evaluate_repetitions();

    use rayon::prelude::*;
    let rows: Vec<EvaluationRow> = problem
        .test
        .par_iter()
        .map(|built| {
            let quality = apply_portfolio(
                &portfolio,
                built.instance.as_ref(),
                cfg.real_norm_samples,
                cfg.solver_budget,
                repetitions,
                cfg.seed,
            )?;
            Ok(EvaluationRow {
                instance_id: built.instance.id().to_string(),
                dimension: built.dimension,
                quality,
            })
        })
        .collect::<papforge::Result<_>>()?;

    let mean_quality = rows.iter().map(|r| r.quality).sum::<f64>() / rows.len() as f64;
    let mut per_dimension: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in &rows {
        let slot = per_dimension.entry(r.dimension).or_insert((0.0, 0));
        slot.0 += r.quality;
        slot.1 += 1;
    }
    let per_dimension: BTreeMap<usize, f64> = per_dimension
        .into_iter()
        .map(|(d, (s, n))| (d, s / n as f64))
        .collect();

    let mut csv = String::from("instance_id,dimension,quality\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.instance_id, r.dimension, r.quality
        ));
    }
    std::fs::write(out.join("evaluation.csv"), csv)?;
    let summary = EvaluationSummary {
        portfolio_members: portfolio.len(),
        repetitions,
        mean_quality,
        per_dimension,
        rows,
    };
    std::fs::write(
        out.join("evaluation.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    log_line(
        "info",
        &format!(
            "mean normalized quality {mean_quality:.4} over {} instances",
            summary.rows.len()
        ),
    );
    Ok(())
}

fn load_portfolio(source: &PapSource) -> Result<Portfolio> {
    match source {
        PapSource::Baseline => Ok(baseline_brkga_pap()),
        PapSource::File(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))?;
            let checkpoint: papforge::coevolution::PapCheckpoint = serde_json::from_str(&text)?;
            Ok(Portfolio::with_duplicates(checkpoint.members)?)
        }
    }
}

pub fn features(
    manifest: &Manifest,
    scale: Scale,
    run_dir: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<()> {
    guard_completed(out, &out.join("features.json"), force)?;
    std::fs::create_dir_all(out)?;
    let problem = build_problem(manifest)?;
    let (n_solutions, n_pairs) = manifest.run.feature_counts(scale);
    let mut groups: Vec<(String, Arc<dyn ProblemInstance>)> = Vec::new();
    for b in &problem.train {
        groups.push(("train".into(), b.instance.clone()));
    }
    for b in &problem.test {
        groups.push(("test".into(), b.instance.clone()));
    }
    if let Some(dir) = run_dir {
        let paths = RunPaths::new(dir);
        let (shared, _, _) = load_checkpoint(&paths.nirs_dir())?;
        // Newest pool on disk.
        let mut round = 0usize;
        while paths.pool_dir(round + 1).join("pool.json").exists() {
            round += 1;
        }
        let pool = read_nir_pool(&paths.pool_dir(round), &shared)?;
        for member in &pool.members {
            if let PoolEntry::Nir(_) = member.entry {
                groups.push(("generated".into(), member.instance().clone()));
            }
        }
    }

    log_line(
        "info",
        &format!(
            "extracting features for {} instances ({n_solutions} solutions, {n_pairs} pairs each)",
            groups.len()
        ),
    );
    let vectors: Vec<FeatureVector> = groups
        .iter()
        .map(|(_, inst)| {
            extract_features(
                inst.as_ref(),
                n_solutions,
                n_pairs,
                seeds::mix(&[
                    manifest.seed,
                    seeds::hash_label("features"),
                    seeds::hash_label(inst.id()),
                ]),
            )
        })
        .collect::<papforge::Result<_>>()?;

    // The projection is fitted on real instances only.
    let fit: Vec<FeatureVector> = groups
        .iter()
        .zip(&vectors)
        .filter(|((g, _), _)| g == "train" || g == "test")
        .map(|(_, v)| v.clone())
        .collect();
    let coords = if fit.len() >= 3 {
        Some(fit_project_pca(&fit, &vectors)?)
    } else {
        log_line("warn", "fewer than 3 real instances; skipping projection");
        None
    };

    let records: Vec<FeatureRecord> = groups
        .iter()
        .zip(&vectors)
        .enumerate()
        .map(|(i, ((group, inst), vector))| FeatureRecord {
            instance_id: inst.id().to_string(),
            group: group.clone(),
            vector: vector.clone(),
            coords: coords.as_ref().map(|p| p.coords[i]),
        })
        .collect();
    let json = serde_json::to_string_pretty(&records)?;
    std::fs::write(out.join("features.json"), &json)?;
    if let Some(dir) = run_dir {
        std::fs::write(dir.join("features.json"), &json)?;
    }
    let mut csv = String::from("instance_id,group,x,y\n");
    for r in &records {
        if let Some([x, y]) = r.coords {
            csv.push_str(&format!("{},{},{x},{y}\n", r.instance_id, r.group));
        }
    }
    std::fs::write(out.join("feature_coords.csv"), csv)?;
    log_line("info", &format!("features written to {}", out.display()));
    Ok(())
}

#[derive(Serialize)]
pub struct VerifyRow {
    pub id: String,
    pub target: Option<String>,
    pub recovered: String,
    pub exact: Option<bool>,
    pub l1: f64,
    pub l2: f64,
}

#[derive(Serialize)]
pub struct VerifyChecks {
    pub exact_recoveries: usize,
    pub trained_count: usize,
    pub recovery_pass: bool,
    pub max_validation_prediction_mse: f64,
    pub validation_pass: bool,
    pub trained_median_l1: f64,
    pub random_median_l1: f64,
    pub separation_ratio: f64,
    pub separation_pass: bool,
    pub sampled_median_l1: f64,
    pub sampled_ratio_bounds: [f64; 2],
    pub sampled_ratio_pass: bool,
    pub sampled_median_pass: bool,
}

#[derive(Serialize)]
pub struct VerifyReport {
    pub trained: Vec<VerifyRow>,
    pub random_weight: Vec<VerifyRow>,
    pub embedding_sampled: Vec<VerifyRow>,
    pub checks: VerifyChecks,
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Closest-instance verification: train surrogates on random
/// distance-to-target instances, check that each recovers its exact
/// training target, that randomly weighted controls sit far away, and that
/// embedding-sampled surrogates behave like real instances.
pub fn onemax_verify(manifest: &Manifest, out: &Path, force: bool) -> Result<VerifyReport> {
    guard_completed(out, &out.join("verify.json"), force)?;
    std::fs::create_dir_all(out)?;
    let v = &manifest.verify;
    let seed = manifest.seed;
    let scale = RecoveryScale {
        search_set: v.search_set,
        validation_set: v.validation_set,
    };

    let mut rng = seeds::rng_from(seeds::stream(seed, "verify-instances", 0));
    let instances: Vec<papforge::problems::OneMaxInstance> = (0..v.instances)
        .map(|i| {
            papforge::problems::OneMaxInstance::random(format!("om-{i}"), v.dimension, &mut rng)
        })
        .collect();
    log_line(
        "info",
        &format!("training {} surrogates at d={}", v.instances, v.dimension),
    );
    let data: Vec<_> = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            sample_training_data(
                inst,
                v.training_samples,
                seeds::stream(seed, "verify-data", i as u64),
            )
        })
        .collect::<papforge::Result<_>>()?;
    let arch = NirArch::standard(v.dimension);
    let hyper = NirHyper {
        max_epochs: v.max_epochs,
        patience: v.patience,
        ..NirHyper::default()
    };
    let (shared, embeddings, report) =
        train_nirs(&arch, &data, &hyper, seeds::stream(seed, "verify-train", 0))?;
    let shared = Arc::new(shared);

    let recover = |instance: &dyn ProblemInstance, tag: u64| -> papforge::Result<RecoveryResult> {
        recover_closest_onemax(
            instance,
            v.function_evaluations,
            seeds::stream(seed, "verify-recover", tag),
            scale,
        )
    };

    let mut trained = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let nir = Nir::new(shared.clone(), embeddings[i].clone(), format!("nir-{i}"));
        let result = recover(nir.as_instance()?.as_ref(), i as u64)?;
        let exact = &result.target == inst.target();
        log_line(
            "info",
            &format!(
                "trained {i}: exact={exact} l1={:.3e} l2={:.3e} pred_mse={:.3e}",
                result.l1, result.l2, report.per_instance[i].prediction
            ),
        );
        trained.push(VerifyRow {
            id: format!("nir-{i}"),
            target: Some(inst.target().to_string()),
            recovered: result.target.to_string(),
            exact: Some(exact),
            l1: result.l1,
            l2: result.l2,
        });
    }

    let mut random_weight = Vec::new();
    for j in 0..v.random_weight_nirs {
        // Fresh random weights everywhere, not just the embedding.
        let control = papforge::nir::NirShared::init(
            arch.clone(),
            seeds::stream(seed, "verify-random-weights", j as u64),
        );
        let control = Arc::new(control);
        let mut erng = seeds::rng_from(seeds::stream(seed, "verify-random-embed", j as u64));
        let embedding = control.sample_embedding(&mut erng);
        let nir = Nir::new(control, embedding, format!("random-{j}"));
        let result = recover(nir.as_instance()?.as_ref(), 1000 + j as u64)?;
        log_line(
            "info",
            &format!(
                "random-weight {j}: l1={:.3e} l2={:.3e}",
                result.l1, result.l2
            ),
        );
        random_weight.push(VerifyRow {
            id: format!("random-{j}"),
            target: None,
            recovered: result.target.to_string(),
            exact: None,
            l1: result.l1,
            l2: result.l2,
        });
    }

    let mut embedding_sampled = Vec::new();
    let mut erng = seeds::rng_from(seeds::stream(seed, "verify-sampled-embed", 0));
    for j in 0..v.embedding_sampled_nirs {
        let embedding = shared.sample_embedding(&mut erng);
        let nir = Nir::new(shared.clone(), embedding, format!("sampled-{j}"));
        let result = recover(nir.as_instance()?.as_ref(), 2000 + j as u64)?;
        log_line(
            "info",
            &format!(
                "embedding-sampled {j}: l1={:.3e} l2={:.3e} ratio={:.2}",
                result.l1,
                result.l2,
                result.l2 / result.l1.max(1e-300)
            ),
        );
        embedding_sampled.push(VerifyRow {
            id: format!("sampled-{j}"),
            target: None,
            recovered: result.target.to_string(),
            exact: None,
            l1: result.l1,
            l2: result.l2,
        });
    }

    let exact_recoveries = trained.iter().filter(|r| r.exact == Some(true)).count();
    let recovery_pass = exact_recoveries * 5 >= trained.len() * 4;
    let max_validation_prediction_mse = report
        .per_instance
        .iter()
        .map(|p| p.prediction)
        .fold(0.0, f64::max);
    let validation_pass = max_validation_prediction_mse <= 5e-3;
    let trained_median_l1 = median(&trained.iter().map(|r| r.l1).collect::<Vec<_>>());
    let random_median_l1 = median(&random_weight.iter().map(|r| r.l1).collect::<Vec<_>>());
    let separation_ratio = random_median_l1 / trained_median_l1.max(1e-300);
    let separation_pass = separation_ratio >= 5.0;
    let ratios: Vec<f64> = embedding_sampled
        .iter()
        .map(|r| r.l2 / r.l1.max(1e-300))
        .collect();
    let sampled_ratio_bounds = [
        ratios.iter().copied().fold(f64::INFINITY, f64::min),
        ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    ];
    let sampled_ratio_pass = sampled_ratio_bounds[0] >= 1.0 / 3.0 && sampled_ratio_bounds[1] <= 3.0;
    let sampled_median_l1 = median(&embedding_sampled.iter().map(|r| r.l1).collect::<Vec<_>>());
    let sampled_median_pass = sampled_median_l1 < random_median_l1;

    let report = VerifyReport {
        trained,
        random_weight,
        embedding_sampled,
        checks: VerifyChecks {
            exact_recoveries,
            trained_count: v.instances,
            recovery_pass,
            max_validation_prediction_mse,
            validation_pass,
            trained_median_l1,
            random_median_l1,
            separation_ratio,
            separation_pass,
            sampled_median_l1,
            sampled_ratio_bounds,
            sampled_ratio_pass,
            sampled_median_pass,
        },
    };
    std::fs::write(
        out.join("verify.json"),
        serde_json::to_string_pretty(&report)?,
    )?;

    let c = &report.checks;
    let flag = |b: bool| if b { "PASS" } else { "FAIL" };
    println!("closest-instance verification");
    println!(
        "  exact recovery        {}/{} trained surrogates   {}",
        c.exact_recoveries,
        c.trained_count,
        flag(c.recovery_pass)
    );
    println!(
        "  validation pred MSE   max {:.3e} (<= 5e-3)      {}",
        c.max_validation_prediction_mse,
        flag(c.validation_pass)
    );
    println!(
        "  random-weight gap     {:.1}x median L1 (>= 5x)    {}",
        c.separation_ratio,
        flag(c.separation_pass)
    );
    println!(
        "  sampled L2/L1 range   [{:.2}, {:.2}] in [1/3, 3]   {}",
        c.sampled_ratio_bounds[0],
        c.sampled_ratio_bounds[1],
        flag(c.sampled_ratio_pass)
    );
    println!(
        "  sampled median L1     {:.3e} < random {:.3e}  {}",
        c.sampled_median_l1,
        c.random_median_l1,
        flag(c.sampled_median_pass)
    );
    Ok(report)
}

pub fn report(run_dir: &Path, out: &Path, force: bool) -> Result<()> {
    guard_completed(out, &out.join("summary.json"), force)?;
    emit_report(run_dir, out)?;
    log_line("info", &format!("report written to {}", out.display()));
    Ok(())
}

/// Resolve the output directory: the --out flag wins, then the manifest's
/// `output`, then a default under the working directory.
pub fn resolve_out(flag: Option<PathBuf>, manifest: &Manifest, fallback: &str) -> PathBuf {
    flag.or_else(|| manifest.output.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}
