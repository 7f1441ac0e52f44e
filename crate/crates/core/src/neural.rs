//! Minimal dense-network substrate: batched forward/backward passes over
//! flat 32-bit float parameter vectors, an adaptive first-order optimizer,
//! and weight-bundle file IO.
//!
//! Parameters live in one flat `Vec<f32>` per network (row-major weights
//! then bias, layer by layer), which lets a hypernetwork's output vector be
//! used directly as another network's parameters.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    HardTanh,
    Identity,
}

/// Negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f32 = 0.01;

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::HardTanh => x.clamp(-1.0, 1.0),
            Activation::Identity => x,
        }
    }

    /// Derivative as a function of the pre-activation.
    #[inline]
    pub fn grad(self, pre: f32) -> f32 {
        match self {
            Activation::LeakyRelu => {
                if pre >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::HardTanh => {
                if pre > -1.0 && pre < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.output * self.input + self.output
    }
}

/// Architecture of a dense network; consecutive layer dimensions must chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].output != w[1].input {
                return Err(Error::Shape(format!(
                    "layer output {} does not chain into input {}",
                    w[0].output, w[1].input
                )));
            }
        }
        Ok(Self { layers })
    }

    /// MLP through the listed dimensions, `hidden` activation everywhere
    /// except `last` on the final layer.
    pub fn mlp(dims: &[usize], hidden: Activation, last: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape("mlp needs at least two dims".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                input: dims[i],
                output: dims[i + 1],
                activation: if i + 1 == n { last } else { hidden },
            })
            .collect();
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Flat-vector ranges of each layer's weights and bias.
    pub fn layer_param_ranges(&self) -> Vec<(Range<usize>, Range<usize>)> {
        let mut offset = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = offset..offset + l.output * l.input;
                let b = w.end..w.end + l.output;
                offset = b.end;
                (w, b)
            })
            .collect()
    }
}

/// Activations recorded by a forward pass, consumed by `backward_batch`.
pub struct ForwardCache {
    batch: usize,
    /// acts[0] is the input; acts[l + 1] the output of layer l.
    acts: Vec<Vec<f32>>,
    /// Pre-activation values per layer.
    pres: Vec<Vec<f32>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f32] {
        self.acts.last().unwrap()
    }
}

fn check_params(spec: &NetSpec, params: &[f32]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "expected {} parameters, got {}",
            spec.param_count(),
            params.len()
        )));
    }
    Ok(())
}

fn check_input(spec: &NetSpec, xs: &[f32], batch: usize) -> Result<()> {
    if xs.len() != batch * spec.input_dim() {
        return Err(Error::Shape(format!(
            "expected {} x {} inputs, got {}",
            batch,
            spec.input_dim(),
            xs.len()
        )));
    }
    Ok(())
}

/// Affine layer application: `out[b, o] = bias[o] + sum_i in[b, i] w[o, i]`,
/// followed by the activation; pre-activations land in `pre`.
fn layer_forward(
    layer: &LayerSpec,
    weights: &[f32],
    bias: &[f32],
    input: &[f32],
    batch: usize,
    pre: &mut Vec<f32>,
    out: &mut Vec<f32>,
) {
    let (i_dim, o_dim) = (layer.input, layer.output);
    pre.clear();
    pre.reserve(batch * o_dim);
    for b in 0..batch {
        let row = &input[b * i_dim..(b + 1) * i_dim];
        for o in 0..o_dim {
            let w_row = &weights[o * i_dim..(o + 1) * i_dim];
            let mut acc = bias[o];
            for (x, w) in row.iter().zip(w_row) {
                acc += x * w;
            }
            pre.push(acc);
        }
    }
    out.clear();
    out.extend(pre.iter().map(|&p| layer.activation.apply(p)));
}

/// Forward pass over a batch of row-major inputs, recording every
/// intermediate activation.
pub fn forward_batch(
    spec: &NetSpec,
    params: &[f32],
    xs: &[f32],
    batch: usize,
) -> Result<ForwardCache> {
    check_params(spec, params)?;
    check_input(spec, xs, batch)?;
    let ranges = spec.layer_param_ranges();
    let mut acts: Vec<Vec<f32>> = Vec::with_capacity(spec.layers.len() + 1);
    let mut pres: Vec<Vec<f32>> = Vec::with_capacity(spec.layers.len());
    acts.push(xs.to_vec());
    for (layer, (wr, br)) in spec.layers.iter().zip(&ranges) {
        let mut pre = Vec::new();
        let mut out = Vec::new();
        layer_forward(
            layer,
            &params[wr.clone()],
            &params[br.clone()],
            acts.last().unwrap(),
            batch,
            &mut pre,
            &mut out,
        );
        pres.push(pre);
        acts.push(out);
    }
    Ok(ForwardCache { batch, acts, pres })
}

/// Forward pass keeping only the output; cheaper for inference.
pub fn infer_batch(spec: &NetSpec, params: &[f32], xs: &[f32], batch: usize) -> Result<Vec<f32>> {
    check_params(spec, params)?;
    check_input(spec, xs, batch)?;
    let ranges = spec.layer_param_ranges();
    let mut current = xs.to_vec();
    let mut pre = Vec::new();
    let mut out = Vec::new();
    for (layer, (wr, br)) in spec.layers.iter().zip(&ranges) {
        layer_forward(
            layer,
            &params[wr.clone()],
            &params[br.clone()],
            &current,
            batch,
            &mut pre,
            &mut out,
        );
        std::mem::swap(&mut current, &mut out);
    }
    Ok(current)
}

/// Parameter and input gradients of one backward pass. Parameter gradients
/// are summed over the batch.
pub struct NetGradients {
    pub params: Vec<f32>,
    pub input: Vec<f32>,
}

/// Exact reverse-mode gradients for the recorded forward pass.
pub fn backward_batch(
    spec: &NetSpec,
    params: &[f32],
    cache: &ForwardCache,
    upstream: &[f32],
) -> Result<NetGradients> {
    check_params(spec, params)?;
    if cache.acts.len() != spec.layers.len() + 1
        || cache.acts[0].len() != cache.batch * spec.input_dim()
        || cache.output().len() != cache.batch * spec.output_dim()
    {
        return Err(Error::StaleCache);
    }
    if upstream.len() != cache.batch * spec.output_dim() {
        return Err(Error::Shape(format!(
            "upstream length {} does not match batch {} x output {}",
            upstream.len(),
            cache.batch,
            spec.output_dim()
        )));
    }
    let batch = cache.batch;
    let ranges = spec.layer_param_ranges();
    let mut param_grads = vec![0.0f32; spec.param_count()];
    let mut grad_out = upstream.to_vec();
    for (l, layer) in spec.layers.iter().enumerate().rev() {
        let (i_dim, o_dim) = (layer.input, layer.output);
        let (wr, br) = &ranges[l];
        let weights = &params[wr.clone()];
        let pre = &cache.pres[l];
        let input = &cache.acts[l];

        // Through the activation.
        let mut g_pre = grad_out;
        for (g, &p) in g_pre.iter_mut().zip(pre.iter()) {
            *g *= layer.activation.grad(p);
        }

        let mut grad_in = vec![0.0f32; batch * i_dim];
        {
            let (wg, bg) = param_grads[wr.start..br.end].split_at_mut(wr.len());
            for b in 0..batch {
                let in_row = &input[b * i_dim..(b + 1) * i_dim];
                let gi_row = &mut grad_in[b * i_dim..(b + 1) * i_dim];
                for o in 0..o_dim {
                    let g = g_pre[b * o_dim + o];
                    if g == 0.0 {
                        continue;
                    }
                    bg[o] += g;
                    let wg_row = &mut wg[o * i_dim..(o + 1) * i_dim];
                    let w_row = &weights[o * i_dim..(o + 1) * i_dim];
                    for i in 0..i_dim {
                        wg_row[i] += g * in_row[i];
                        gi_row[i] += g * w_row[i];
                    }
                }
            }
        }
        grad_out = grad_in;
    }
    Ok(NetGradients {
        params: param_grads,
        input: grad_out,
    })
}

/// A dense network owning its parameters.
#[derive(Clone, Debug)]
pub struct DenseNet {
    pub spec: NetSpec,
    pub params: Vec<f32>,
}

impl DenseNet {
    /// Kaiming-uniform initialization (zero bias).
    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Self {
        let mut params = vec![0.0f32; spec.param_count()];
        for (layer, (wr, _)) in spec.layers.iter().zip(spec.layer_param_ranges()) {
            let bound = (6.0 / layer.input as f64).sqrt();
            for w in &mut params[wr] {
                *w = (rng.random_range(-bound..bound)) as f32;
            }
        }
        Self { spec, params }
    }

    pub fn from_params(spec: NetSpec, params: Vec<f32>) -> Result<Self> {
        check_params(&spec, &params)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, x: &[f32]) -> Result<ForwardCache> {
        forward_batch(&self.spec, &self.params, x, 1)
    }

    pub fn forward_batch(&self, xs: &[f32], batch: usize) -> Result<ForwardCache> {
        forward_batch(&self.spec, &self.params, xs, batch)
    }

    pub fn infer_batch(&self, xs: &[f32], batch: usize) -> Result<Vec<f32>> {
        infer_batch(&self.spec, &self.params, xs, batch)
    }

    pub fn backward(&self, cache: &ForwardCache, upstream: &[f32]) -> Result<NetGradients> {
        backward_batch(&self.spec, &self.params, cache, upstream)
    }
}

/// KL divergence of N(mu, diag(sigma^2)) from the standard Gaussian:
/// `0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma)`.
pub fn kl_standard_gaussian(mu: &[f32], sigma: &[f32]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Shape("mu and sigma lengths differ".into()));
    }
    let mut acc = 0.0f64;
    for (&m, &s) in mu.iter().zip(sigma) {
        if s <= 0.0 {
            return Err(Error::NonPositiveSigma(f64::from(s)));
        }
        let (m, s) = (f64::from(m), f64::from(s));
        acc += m * m + s * s - 1.0 - 2.0 * s.ln();
    }
    Ok(0.5 * acc)
}

/// Adaptive-moment optimizer state for one flat parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamState {
    pub fn new(param_count: usize, learning_rate: f32) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected update step. Rejects non-finite gradients instead
    /// of propagating NaN. The update is elementwise, so large parameter
    /// vectors (hypernetwork outputs) are processed in parallel chunks.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<()> {
        use rayon::prelude::*;
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match params".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.t += 1;
        let bc1 = 1.0 - (f64::from(self.beta1)).powi(self.t as i32);
        let bc2 = 1.0 - (f64::from(self.beta2)).powi(self.t as i32);
        let (beta1, beta2) = (self.beta1, self.beta2);
        let (lr, eps) = (f64::from(self.learning_rate), f64::from(self.epsilon));
        const CHUNK: usize = 16 * 1024;
        params
            .par_chunks_mut(CHUNK)
            .zip(self.m.par_chunks_mut(CHUNK))
            .zip(self.v.par_chunks_mut(CHUNK))
            .zip(grads.par_chunks(CHUNK))
            .for_each(|(((ps, ms), vs), gs)| {
                for i in 0..ps.len() {
                    let g = gs[i];
                    ms[i] = beta1 * ms[i] + (1.0 - beta1) * g;
                    vs[i] = beta2 * vs[i] + (1.0 - beta2) * g * g;
                    let m_hat = f64::from(ms[i]) / bc1;
                    let v_hat = f64::from(vs[i]) / bc2;
                    ps[i] -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
                }
            });
        Ok(())
    }
}

/// Write a raw little-endian f32 array.
pub fn write_f32s(path: &Path, values: &[f32]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

/// Read a raw little-endian f32 array.
pub fn read_f32s(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!(
            "{} is not a whole number of f32s",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(input: usize, output: usize, act: Activation) -> NetSpec {
        NetSpec::new(vec![LayerSpec {
            input,
            output,
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn zero_weights_pass_bias_through_identity() {
        let spec = single_layer(3, 2, Activation::Identity);
        let mut params = vec![0.0f32; spec.param_count()];
        params[6] = 1.5;
        params[7] = -0.25;
        let out = infer_batch(&spec, &params, &[0.3, -0.7, 0.9], 1).unwrap();
        assert_eq!(out, vec![1.5, -0.25]);
    }

    #[test]
    fn hard_tanh_clamps() {
        assert_eq!(Activation::HardTanh.apply(2.0), 1.0);
        assert_eq!(Activation::HardTanh.apply(-3.0), -1.0);
        assert_eq!(Activation::HardTanh.apply(0.25), 0.25);
    }

    #[test]
    fn leaky_relu_slope() {
        assert_eq!(Activation::LeakyRelu.apply(-1.0), -0.01);
        assert_eq!(Activation::LeakyRelu.apply(2.0), 2.0);
    }

    #[test]
    fn identity_layer_weight_grad_is_outer_product() {
        let spec = single_layer(3, 2, Activation::Identity);
        let params = vec![0.1f32; spec.param_count()];
        let x = [0.5f32, -1.0, 2.0];
        let cache = forward_batch(&spec, &params, &x, 1).unwrap();
        let upstream = [2.0f32, -3.0];
        let grads = backward_batch(&spec, &params, &cache, &upstream).unwrap();
        // weight grad [o][i] = upstream[o] * x[i]
        let expected = [1.0, -2.0, 4.0, -1.5, 3.0, -6.0];
        for (g, e) in grads.params[..6].iter().zip(expected) {
            assert!((g - e).abs() < 1e-6);
        }
        // bias grad = upstream
        assert_eq!(&grads.params[6..], &upstream);
    }

    #[test]
    fn zero_upstream_means_zero_grads() {
        let mut rng = crate::seeds::rng_from(1);
        let spec = NetSpec::mlp(&[4, 8, 3], Activation::LeakyRelu, Activation::Identity).unwrap();
        let net = DenseNet::init(spec, &mut rng);
        let x = [0.2f32, -0.4, 0.9, 1.3];
        let cache = net.forward(&x).unwrap();
        let grads = net.backward(&cache, &[0.0, 0.0, 0.0]).unwrap();
        assert!(grads.params.iter().all(|&g| g == 0.0));
        assert!(grads.input.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kl_zero_at_standard_gaussian() {
        assert_eq!(kl_standard_gaussian(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn kl_of_unit_mean() {
        let kl = kl_standard_gaussian(&[1.0], &[1.0]).unwrap();
        assert!((kl - 0.5).abs() < 1e-7);
    }

    #[test]
    fn kl_closed_form_at_sigma_e() {
        // 0.5 (e^2 - 3), from substituting mu = 0, sigma = e.
        let e = std::f64::consts::E;
        let expected = 0.5 * (e * e - 3.0);
        let kl = kl_standard_gaussian(&[0.0], &[e as f32]).unwrap();
        assert!((kl - expected).abs() < 1e-5, "kl={kl} expected={expected}");
    }

    #[test]
    fn kl_rejects_nonpositive_sigma() {
        assert!(kl_standard_gaussian(&[0.0], &[0.0]).is_err());
        assert!(kl_standard_gaussian(&[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn kl_nonnegative_on_grid() {
        for mi in -4i32..=4 {
            for si in 1..=40 {
                let mu = mi as f32 * 0.5;
                let sigma = si as f32 * 0.1;
                let kl = kl_standard_gaussian(&[mu], &[sigma]).unwrap();
                assert!(kl >= -1e-9, "kl({mu},{sigma})={kl}");
                if mu == 0.0 && (sigma - 1.0).abs() < 1e-7 {
                    assert!(kl.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn adam_zero_grads_leave_params_unchanged() {
        let mut state = AdamState::new(3, 1e-3);
        let mut params = vec![0.5f32, -0.25, 1.0];
        let before = params.clone();
        state.step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_magnitude_near_learning_rate() {
        // Bias-corrected first step for unit gradient: lr * 1 / (1 + eps).
        let mut state = AdamState::new(1, 1e-3);
        let mut params = vec![0.0f32];
        state.step(&mut params, &[1.0]).unwrap();
        assert!((params[0] + 1e-3).abs() < 1e-8, "step={}", params[0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut state = AdamState::new(2, 1e-2);
            let mut params = vec![0.1f32, -0.2];
            for i in 0..50 {
                let g = [(i as f32 * 0.1).sin(), (i as f32 * 0.2).cos()];
                state.step(&mut params, &g).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut state = AdamState::new(1, 1e-3);
        let mut params = vec![0.0f32];
        assert!(state.step(&mut params, &[f32::NAN]).is_err());
        assert!(state.step(&mut params, &[f32::INFINITY]).is_err());
    }

    #[test]
    fn weights_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let values = vec![0.5f32, -1.25, 3.75e-3, f32::MIN_POSITIVE];
        write_f32s(&path, &values).unwrap();
        assert_eq!(read_f32s(&path).unwrap(), values);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let mut rng = crate::seeds::rng_from(2);
        let spec_a = NetSpec::mlp(&[4, 8, 3], Activation::LeakyRelu, Activation::Identity).unwrap();
        let spec_b = NetSpec::mlp(&[5, 8, 3], Activation::LeakyRelu, Activation::Identity).unwrap();
        let net_a = DenseNet::init(spec_a, &mut rng);
        let net_b = DenseNet::init(spec_b, &mut rng);
        let cache = net_a.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(matches!(
            net_b.backward(&cache, &[1.0, 1.0, 1.0]),
            Err(Error::StaleCache) | Err(Error::Shape(_))
        ));
    }
}
