//! Brute-force oracle equivalences: the contamination objective against
//! hand-simulated trajectories, the cascade evaluator against exhaustive
//! edge-outcome enumeration, and target-invariance of the distance-based
//! neighborhood features.

use std::sync::Arc;

use papforge::analysis::extract_features;
use papforge::problems::{
    BitString, CcpInstance, CcpScenario, ComicInstance, ComicParams, Graph, OneMaxInstance,
    ProblemInstance,
};
use papforge::seeds;

#[test]
fn ccp_matches_hand_simulated_trajectories() {
    let scenarios = vec![
        CcpScenario {
            alpha: vec![0.30, 0.60],
            gamma: vec![0.50, 0.20],
            z0: 0.05,
        },
        CcpScenario {
            alpha: vec![0.80, 0.10],
            gamma: vec![0.90, 0.70],
            z0: 0.50,
        },
        CcpScenario {
            alpha: vec![0.15, 0.45],
            gamma: vec![0.35, 0.55],
            z0: 0.95,
        },
    ];
    let lambda = 1e-2;
    let costs = vec![1.0, 2.0];
    let limits = vec![0.1, 0.1];
    let inst = CcpInstance::with_scenarios(
        "hand",
        lambda,
        costs.clone(),
        limits.clone(),
        scenarios.clone(),
    );

    // Independent trajectory simulation, written without reference to the
    // implementation.
    #[allow(clippy::needless_range_loop)]
    let oracle = |bits: [u8; 2]| -> f64 {
        let t = scenarios.len() as f64;
        let mut total = 0.0;
        for (i, &cost) in costs.iter().enumerate() {
            let mut violations = 0.0;
            for sc in &scenarios {
                let mut z = sc.z0;
                for stage in 0..=i {
                    let x = f64::from(bits[stage]);
                    z = sc.alpha[stage] * (1.0 - x) * (1.0 - z) + (1.0 - sc.gamma[stage] * x) * z;
                }
                if z > limits[i] {
                    violations += 1.0;
                }
            }
            total += cost * f64::from(bits[i]) + violations / t;
        }
        total += lambda * f64::from(bits[0] + bits[1]);
        -total
    };

    for bits in [[0u8, 0], [0, 1], [1, 0], [1, 1]] {
        let x = BitString::from_bits(bits.to_vec()).unwrap();
        let got = inst.evaluate(&x).unwrap();
        let want = oracle(bits);
        assert!(
            (got - want).abs() < 1e-12,
            "x={bits:?}: got {got}, oracle {want}"
        );
    }
}

#[test]
fn comic_matches_exhaustive_edge_enumeration() {
    // Three nodes, three edges, deterministic adoption (q = 1): the spread
    // is exactly the reachable-set size under random edge liveness.
    let edges = [(0u64, 1u64, 0.5f64), (1, 2, 0.5), (0, 2, 0.5)];
    let graph = Arc::new(
        Graph::from_edges(
            &edges
                .iter()
                .map(|&(u, v, p)| (u, v, Some(p)))
                .collect::<Vec<_>>(),
        )
        .unwrap(),
    );
    let params = ComicParams {
        q_a_none: 0.0,
        q_a_given_b: 0.0,
        q_b_none: 1.0,
        q_b_given_a: 1.0,
    };
    let replications = 20_000;
    let inst = ComicInstance::new(
        "enum",
        graph,
        &[],
        &[0, 1, 2],
        params,
        3,
        replications,
        1234,
    )
    .unwrap();
    let x = BitString::from_str01("100").unwrap();
    let mc = inst.evaluate(&x).unwrap();

    // Exhaustive enumeration over all 2^|E| liveness patterns.
    let mut expectation = 0.0;
    let mut second_moment = 0.0;
    for pattern in 0u32..(1 << edges.len()) {
        let mut prob = 1.0;
        let mut live = Vec::new();
        for (i, &(u, v, p)) in edges.iter().enumerate() {
            if pattern >> i & 1 == 1 {
                prob *= p;
                live.push((u, v));
            } else {
                prob *= 1.0 - p;
            }
        }
        // Reachability from the single B seed (node 0).
        let mut reach = [false; 3];
        reach[0] = true;
        loop {
            let mut changed = false;
            for &(u, v) in &live {
                if reach[u as usize] && !reach[v as usize] {
                    reach[v as usize] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let count = reach.iter().filter(|&&r| r).count() as f64;
        expectation += prob * count;
        second_moment += prob * count * count;
    }
    let variance = second_moment - expectation * expectation;
    let standard_error = (variance / replications as f64).sqrt();
    assert!(
        (mc - expectation).abs() <= 3.0 * standard_error,
        "mc {mc} vs exact {expectation} (3 SE = {})",
        3.0 * standard_error
    );
}

#[test]
fn onemax_features_are_target_invariant() {
    // The objective is a pure function of the Hamming distance to the
    // target, so per-distance difference statistics cannot depend on which
    // target was drawn, up to sampling noise.
    let mut rng = seeds::rng_from(88);
    let a = OneMaxInstance::random("om-a", 30, &mut rng);
    let b = OneMaxInstance::random("om-b", 30, &mut rng);
    assert_ne!(a.target(), b.target());
    let fa = extract_features(&a, 50_000, 500_000, 5).unwrap();
    let fb = extract_features(&b, 50_000, 500_000, 6).unwrap();
    let linf = fa
        .values
        .iter()
        .zip(&fb.values)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(linf <= 0.05, "L-infinity distance {linf}");
}
