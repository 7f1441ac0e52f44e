//! Head-to-head check of the embedding-space mutation operator: guided
//! search must find harder surrogate instances than blind perturbation from
//! the same parent embedding and sampling spread.

use std::sync::Arc;

use papforge::brkga::SolverConfig;
use papforge::nir::{sample_training_data, train_nirs, InstanceData, Nir, NirArch, NirHyper};
use papforge::pgpe::{mutate_instance, PgpeParams};
use papforge::portfolio::{compute_norm_bounds, measure_config_on_instance, Portfolio};
use papforge::problems::OneMaxInstance;
use papforge::seeds;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn guided_mutation_beats_blind_perturbation() {
    // Small trained surrogate family.
    let d = 10usize;
    let mut rng = seeds::rng_from(5);
    let instances: Vec<OneMaxInstance> = (0..3)
        .map(|i| OneMaxInstance::random(format!("om{i}"), d, &mut rng))
        .collect();
    let data: Vec<InstanceData> = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            sample_training_data(inst, 3000, seeds::stream(9, "data", i as u64)).unwrap()
        })
        .collect();
    let arch = NirArch::tiny(d, 32, 16);
    let hyper = NirHyper {
        max_epochs: 25,
        patience: 8,
        ..Default::default()
    };
    let (shared, embeddings, _) = train_nirs(&arch, &data, &hyper, 77).unwrap();
    let shared = Arc::new(shared);
    let parent = Nir::new(shared.clone(), embeddings[0].clone(), "parent");

    // A deliberately weak single-member portfolio.
    let weak = Portfolio::new(vec![SolverConfig::new(2, 6, 2, 0.5, false).unwrap()]).unwrap();
    let evaluate = |nir: &Nir| -> papforge::Result<f64> {
        let inst = nir.as_instance()?;
        let bounds = compute_norm_bounds(inst.as_ref(), 2048, 1)?;
        measure_config_on_instance(&weak.members()[0], inst.as_ref(), &bounds, 100, 1, 33)
    };
    let parent_f = evaluate(&parent).unwrap();

    let mut wins = 0;
    for trial in 0..10u64 {
        let outcome = mutate_instance(
            &parent,
            parent_f,
            30,
            &PgpeParams::default(),
            &evaluate,
            "child",
            1000 + trial,
        )
        .unwrap();
        assert!(outcome.f <= parent_f);

        // Baseline: 30 independent draws from the operator's own initial
        // sampling distribution around the parent.
        let mut rng = seeds::rng_from(seeds::mix(&[2000, trial]));
        let mut blind_best = f64::INFINITY;
        for _ in 0..30 {
            let e: Vec<f32> = parent
                .embedding
                .iter()
                .map(|&m| {
                    let v: f64 = rng.sample(StandardNormal);
                    m + v as f32
                })
                .collect();
            let f = evaluate(&Nir::new(shared.clone(), e, "rand")).unwrap();
            blind_best = blind_best.min(f);
        }
        if outcome.f < blind_best {
            wins += 1;
        }
    }
    assert!(wins >= 7, "guided mutation won only {wins}/10 trials");
}
