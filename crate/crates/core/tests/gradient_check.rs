//! Gradient checks against an independent double-precision reference.
//!
//! The reference forward pass below is written separately from the library's
//! f32 path and evaluated in f64, so central finite differences on it are
//! accurate to ~1e-10; the comparison error is then dominated by the f32
//! arithmetic of the implementation under test.

use papforge::neural::{backward_batch, forward_batch, Activation, DenseNet, NetSpec};
use papforge::seeds;
use rand::Rng;

fn ref_activation(act: Activation, x: f64) -> f64 {
    match act {
        Activation::LeakyRelu => {
            if x >= 0.0 {
                x
            } else {
                0.01 * x
            }
        }
        Activation::HardTanh => x.clamp(-1.0, 1.0),
        Activation::Identity => x,
    }
}

/// Independent f64 forward pass over the same flat parameter layout.
fn ref_forward(spec: &NetSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut current = x.to_vec();
    let mut offset = 0;
    for layer in &spec.layers {
        let (i_dim, o_dim) = (layer.input, layer.output);
        let weights = &params[offset..offset + o_dim * i_dim];
        let bias = &params[offset + o_dim * i_dim..offset + o_dim * i_dim + o_dim];
        offset += o_dim * i_dim + o_dim;
        let mut next = Vec::with_capacity(o_dim);
        for o in 0..o_dim {
            let mut acc = bias[o];
            for i in 0..i_dim {
                acc += current[i] * weights[o * i_dim + i];
            }
            next.push(ref_activation(layer.activation, acc));
        }
        current = next;
    }
    current
}

/// Scalar loss used for the check: weighted sum of outputs (weights fixed
/// per test case so the loss is smooth and non-degenerate).
fn ref_loss(spec: &NetSpec, params: &[f64], x: &[f64], loss_w: &[f64]) -> f64 {
    ref_forward(spec, params, x)
        .iter()
        .zip(loss_w)
        .map(|(y, w)| y * w)
        .sum()
}

fn central_diff(
    spec: &NetSpec,
    params: &[f64],
    x: &[f64],
    loss_w: &[f64],
    idx: usize,
    h: f64,
) -> f64 {
    let mut plus = params.to_vec();
    let mut minus = params.to_vec();
    plus[idx] += h;
    minus[idx] -= h;
    (ref_loss(spec, &plus, x, loss_w) - ref_loss(spec, &minus, x, loss_w)) / (2.0 * h)
}

fn central_diff_input(
    spec: &NetSpec,
    params: &[f64],
    x: &[f64],
    loss_w: &[f64],
    idx: usize,
    h: f64,
) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[idx] += h;
    minus[idx] -= h;
    (ref_loss(spec, params, &plus, loss_w) - ref_loss(spec, params, &minus, loss_w)) / (2.0 * h)
}

fn random_spec(rng: &mut impl Rng) -> NetSpec {
    let acts = [
        Activation::LeakyRelu,
        Activation::HardTanh,
        Activation::Identity,
    ];
    let depth = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(2..=16usize)];
    for _ in 0..depth {
        dims.push(rng.random_range(2..=16usize));
    }
    let layers = (0..depth)
        .map(|i| papforge::neural::LayerSpec {
            input: dims[i],
            output: dims[i + 1],
            activation: acts[rng.random_range(0..acts.len())],
        })
        .collect();
    NetSpec::new(layers).unwrap()
}

/// Relative error with a floor tied to the gradient scale, so near-zero
/// components do not dominate the ratio.
fn rel_err(got: f64, want: f64, scale: f64) -> f64 {
    (got - want).abs() / want.abs().max(scale)
}

#[test]
fn dense_backward_matches_finite_differences() {
    let h = 1e-4;
    for seed in 0..20u64 {
        let mut rng = seeds::rng_from(seeds::mix(&[97, seed]));
        let spec = random_spec(&mut rng);
        let net = DenseNet::init(spec.clone(), &mut rng);
        let x: Vec<f32> = (0..spec.input_dim())
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        let loss_w: Vec<f64> = (0..spec.output_dim())
            .map(|_| rng.random_range(-1.0..1.0f64))
            .collect();

        let cache = forward_batch(&spec, &net.params, &x, 1).unwrap();
        let upstream: Vec<f32> = loss_w.iter().map(|&w| w as f32).collect();
        let grads = backward_batch(&spec, &net.params, &cache, &upstream).unwrap();

        let params64: Vec<f64> = net.params.iter().map(|&p| f64::from(p)).collect();
        let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();

        let scale = grads
            .params
            .iter()
            .chain(&grads.input)
            .map(|g| f64::from(g.abs()))
            .fold(0.0, f64::max)
            .max(1e-6);

        let mut worst = 0.0f64;
        for idx in 0..params64.len() {
            let fd = central_diff(&spec, &params64, &x64, &loss_w, idx, h);
            worst = worst.max(rel_err(f64::from(grads.params[idx]), fd, scale));
        }
        for idx in 0..x64.len() {
            let fd = central_diff_input(&spec, &params64, &x64, &loss_w, idx, h);
            worst = worst.max(rel_err(f64::from(grads.input[idx]), fd, scale));
        }
        assert!(
            worst < 1e-4,
            "seed {seed}: max relative error {worst:.3e} exceeds 1e-4"
        );
    }
}
