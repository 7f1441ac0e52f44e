//! Neural instance representation: a shared variational autoencoder and
//! hypernetwork plus one trainable embedding per instance.
//!
//! The encoder maps a +-1-encoded solution to the mean and (log-)variance
//! of a latent Gaussian; the decoder reconstructs the solution from a latent
//! sample; a scorer reads the concatenated mean and standard deviation and
//! predicts the normalized objective value. The scorer's weights are not
//! free parameters: they are emitted by a hypernetwork from the instance
//! embedding, so perturbing the embedding alone yields new synthetic
//! instances that keep the learned domain-invariant structure.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brkga::{brkga_run_observed, SolverConfig};
use crate::error::{Error, Result};
use crate::neural::{
    backward_batch, forward_batch, infer_batch, read_f32s, write_f32s, Activation, AdamState,
    DenseNet, NetSpec,
};
use crate::problems::{BitString, ProblemInstance};
use crate::seeds;

/// Parameter count of the scorer for an instance of dimension `d_i` under
/// the standard architecture (2 d_i -> 128 -> 128 -> 1).
pub fn scorer_param_count(d_i: usize) -> usize {
    256 * d_i + 16_769
}

/// Network shape of one NIR family. The latent dimension always equals the
/// model dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NirArch {
    pub d_model: usize,
    pub d_e: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub scorer_hidden: Vec<usize>,
    pub hypernet_hidden: Vec<usize>,
}

impl NirArch {
    /// Published sizes: 128-wide encoder/decoder/scorer, 64-wide
    /// hypernetwork hidden layer, 64-dimensional embeddings.
    pub fn standard(d_model: usize) -> Self {
        Self {
            d_model,
            d_e: 64,
            encoder_hidden: vec![128, 128],
            decoder_hidden: vec![128, 128],
            scorer_hidden: vec![128, 128],
            hypernet_hidden: vec![64],
        }
    }

    /// Narrow variant for tests and toy studies.
    pub fn tiny(d_model: usize, width: usize, d_e: usize) -> Self {
        Self {
            d_model,
            d_e,
            encoder_hidden: vec![width, width],
            decoder_hidden: vec![width, width],
            scorer_hidden: vec![width, width],
            hypernet_hidden: vec![width],
        }
    }

    pub fn d_z(&self) -> usize {
        self.d_model
    }

    fn dims(first: usize, hidden: &[usize], last: usize) -> Vec<usize> {
        let mut dims = vec![first];
        dims.extend_from_slice(hidden);
        dims.push(last);
        dims
    }

    /// Hidden layers are leaky-rectified throughout; the decoder output is
    /// clamped by HardTanh. The encoder and hypernetwork outputs are linear
    /// because their outputs must cover symmetric ranges (latent statistics
    /// and a full weight vector — a squashed hypernetwork output would
    /// cripple the scorer). The scorer keeps a leaky-rectified output: its
    /// targets are nonnegative and the rectifier tames downside
    /// extrapolation on rare inputs, which would otherwise stretch
    /// min-max normalization bounds.
    pub fn encoder_spec(&self) -> NetSpec {
        let dims = Self::dims(self.d_model, &self.encoder_hidden, 2 * self.d_z());
        NetSpec::mlp(&dims, Activation::LeakyRelu, Activation::Identity).unwrap()
    }

    pub fn decoder_spec(&self) -> NetSpec {
        let dims = Self::dims(self.d_z(), &self.decoder_hidden, self.d_model);
        NetSpec::mlp(&dims, Activation::LeakyRelu, Activation::HardTanh).unwrap()
    }

    pub fn scorer_spec(&self) -> NetSpec {
        let dims = Self::dims(2 * self.d_z(), &self.scorer_hidden, 1);
        NetSpec::mlp(&dims, Activation::LeakyRelu, Activation::LeakyRelu).unwrap()
    }

    pub fn hypernet_spec(&self) -> NetSpec {
        let dims = Self::dims(
            self.d_e,
            &self.hypernet_hidden,
            self.scorer_spec().param_count(),
        );
        NetSpec::mlp(&dims, Activation::LeakyRelu, Activation::Identity).unwrap()
    }
}

/// Weights shared by every NIR of a problem class.
#[derive(Clone, Debug)]
pub struct NirShared {
    pub arch: NirArch,
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    pub hypernet: DenseNet,
}

impl NirShared {
    pub fn init(arch: NirArch, seed: u64) -> Self {
        let mut rng = seeds::rng_from(seeds::mix(&[seed, seeds::hash_label("nir-shared")]));
        let encoder = DenseNet::init(arch.encoder_spec(), &mut rng);
        let decoder = DenseNet::init(arch.decoder_spec(), &mut rng);
        let mut hypernet = DenseNet::init(arch.hypernet_spec(), &mut rng);

        // The hypernetwork's raw output becomes the scorer's weight vector,
        // so its final layer starts near a constant function whose bias is a
        // properly scaled scorer initialization; specialization to the
        // embedding is then learned instead of starting from weights whose
        // magnitudes explode through the scorer.
        let ranges = hypernet.spec.layer_param_ranges();
        let (wr, br) = ranges.last().unwrap().clone();
        for w in &mut hypernet.params[wr] {
            *w *= 0.02;
        }
        let scorer_spec = arch.scorer_spec();
        let bias = &mut hypernet.params[br];
        for (layer, (swr, _)) in scorer_spec
            .layers
            .iter()
            .zip(scorer_spec.layer_param_ranges())
        {
            let bound = (6.0 / layer.input as f64).sqrt();
            for slot in &mut bias[swr] {
                *slot = rng.random_range(-bound..bound) as f32;
            }
        }
        Self {
            arch,
            encoder,
            decoder,
            hypernet,
        }
    }

    /// Scorer weights for an embedding; a pure function of `e`.
    pub fn materialize_scorer(&self, embedding: &[f32]) -> Result<Vec<f32>> {
        self.hypernet.infer_batch(embedding, 1)
    }

    /// Random embedding from the standard normal prior.
    pub fn sample_embedding<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        (0..self.arch.d_e)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                v as f32
            })
            .collect()
    }
}

/// Solution encoding: 0 -> -1, 1 -> +1, zero-padded or truncated to the
/// model dimension.
pub fn embed_input(x: &BitString, d_model: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(d_model);
    for i in 0..d_model.min(x.len()) {
        out.push(if x.get(i) == 1 { 1.0 } else { -1.0 });
    }
    out.resize(d_model, 0.0);
    out
}

/// Latent sampling mode: deterministic scoring uses the mean.
pub enum LatentMode<'a> {
    Deterministic,
    Sample(&'a mut rand_chacha::ChaCha8Rng),
}

/// One full pass through an NIR.
#[derive(Clone, Debug)]
pub struct NirOutput {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    pub z: Vec<f32>,
    pub x_recon: Vec<f32>,
    pub y_pred: f32,
}

/// Forward pass: encode, (optionally) sample the latent, decode, and score
/// the concatenated latent statistics with hypernetwork-materialized
/// weights.
pub fn nir_forward(
    shared: &NirShared,
    embedding: &[f32],
    x: &BitString,
    mode: LatentMode<'_>,
) -> Result<NirOutput> {
    let d_z = shared.arch.d_z();
    let x_emb = embed_input(x, shared.arch.d_model);
    let enc_out = shared.encoder.infer_batch(&x_emb, 1)?;
    let mu = enc_out[..d_z].to_vec();
    let sigma: Vec<f32> = enc_out[d_z..].iter().map(|&lv| (0.5 * lv).exp()).collect();
    let z: Vec<f32> = match mode {
        LatentMode::Deterministic => mu.clone(),
        LatentMode::Sample(rng) => mu
            .iter()
            .zip(&sigma)
            .map(|(&m, &s)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + s * eps as f32
            })
            .collect(),
    };
    let x_recon = shared.decoder.infer_batch(&z, 1)?;
    let scorer_params = shared.materialize_scorer(embedding)?;
    let scorer_in: Vec<f32> = mu.iter().chain(&sigma).copied().collect();
    let y = infer_batch(&shared.arch.scorer_spec(), &scorer_params, &scorer_in, 1)?;
    Ok(NirOutput {
        mu,
        sigma,
        z,
        x_recon,
        y_pred: y[0],
    })
}

/// A neural instance representation: shared weights plus one embedding.
#[derive(Clone, Debug)]
pub struct Nir {
    pub shared: Arc<NirShared>,
    pub embedding: Vec<f32>,
    pub id: String,
}

impl Nir {
    pub fn new(shared: Arc<NirShared>, embedding: Vec<f32>, id: impl Into<String>) -> Self {
        Self {
            shared,
            embedding,
            id: id.into(),
        }
    }

    /// Expose the NIR as a problem instance with deterministic scoring.
    pub fn as_instance(&self) -> Result<Arc<NirInstance>> {
        Ok(Arc::new(NirInstance::new(
            self.shared.clone(),
            self.embedding.clone(),
            self.id.clone(),
        )?))
    }
}

/// Problem-instance adapter over an NIR; scorer weights are materialized
/// once at construction.
pub struct NirInstance {
    shared: Arc<NirShared>,
    #[allow(dead_code)]
    embedding: Vec<f32>,
    scorer_params: Vec<f32>,
    id: String,
}

impl NirInstance {
    pub fn new(shared: Arc<NirShared>, embedding: Vec<f32>, id: String) -> Result<Self> {
        if embedding.len() != shared.arch.d_e {
            return Err(Error::Shape(format!(
                "embedding length {} != d_e {}",
                embedding.len(),
                shared.arch.d_e
            )));
        }
        let scorer_params = shared.materialize_scorer(&embedding)?;
        Ok(Self {
            shared,
            embedding,
            scorer_params,
            id,
        })
    }

    fn score_chunk(&self, xs: &[BitString]) -> Result<Vec<f64>> {
        let arch = &self.shared.arch;
        let d = arch.d_model;
        let d_z = arch.d_z();
        let batch = xs.len();
        let mut flat = Vec::with_capacity(batch * d);
        for x in xs {
            flat.extend(embed_input(x, d));
        }
        let enc_out = self.shared.encoder.infer_batch(&flat, batch)?;
        let mut scorer_in = Vec::with_capacity(batch * 2 * d_z);
        for b in 0..batch {
            let row = &enc_out[b * 2 * d_z..(b + 1) * 2 * d_z];
            scorer_in.extend_from_slice(&row[..d_z]);
            scorer_in.extend(row[d_z..].iter().map(|&lv| (0.5 * lv).exp()));
        }
        let ys = infer_batch(&arch.scorer_spec(), &self.scorer_params, &scorer_in, batch)?;
        Ok(ys.into_iter().map(f64::from).collect())
    }
}

impl ProblemInstance for NirInstance {
    fn dimension(&self) -> usize {
        self.shared.arch.d_model
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn evaluate(&self, x: &BitString) -> Result<f64> {
        Ok(self.score_chunk(std::slice::from_ref(x))?[0])
    }

    fn evaluate_batch(&self, xs: &[BitString]) -> Result<Vec<f64>> {
        const CHUNK: usize = 512;
        let outputs: Vec<Result<Vec<f64>>> = xs
            .par_chunks(CHUNK)
            .map(|chunk| self.score_chunk(chunk))
            .collect();
        let mut all = Vec::with_capacity(xs.len());
        for o in outputs {
            all.extend(o?);
        }
        Ok(all)
    }
}

/// Solution/score pairs with objective values normalized to [0, 1].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingPairs {
    pub xs: Vec<BitString>,
    pub ys: Vec<f64>,
}

impl TrainingPairs {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Per-instance training data with a 3:1 train/validation split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceData {
    pub instance_id: String,
    pub train: TrainingPairs,
    pub valid: TrainingPairs,
}

/// Collect `n` solution/score pairs from an instance: half uniform-random
/// solutions, half harvested from BRKGA search trajectories. Scores are
/// min-max normalized over the collected set.
pub fn sample_training_data(
    instance: &dyn ProblemInstance,
    n: usize,
    seed: u64,
) -> Result<InstanceData> {
    assert!(n >= 8, "need at least 8 samples");
    let dim = instance.dimension();
    let n_random = n / 2;
    let n_traj = n - n_random;

    let mut rng = seeds::rng_from(seeds::mix(&[seed, seeds::hash_label("random-half")]));
    let mut xs: Vec<BitString> = (0..n_random)
        .map(|_| BitString::random(dim, &mut rng))
        .collect();
    let mut ys = instance.evaluate_batch(&xs)?;

    // Trajectory half: every evaluation of a small fixed-configuration run.
    // When the budget cannot fit even one generation the remainder falls
    // back to uniform sampling.
    let traj_config = SolverConfig::new(10, 25, 5, 0.7, false).unwrap();
    if n_traj >= traj_config.population_total() {
        let mut collected = 0usize;
        brkga_run_observed(
            &traj_config,
            instance,
            n_traj,
            seeds::mix(&[seed, seeds::hash_label("trajectory-half")]),
            |x, y| {
                if collected < n_traj {
                    xs.push(x.clone());
                    ys.push(y);
                    collected += 1;
                }
            },
        )?;
    }
    while xs.len() < n {
        let x = BitString::random(dim, &mut rng);
        let y = instance.evaluate(&x)?;
        xs.push(x);
        ys.push(y);
    }

    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::DegenerateInstance(instance.id().to_string()));
    }
    let ys: Vec<f64> = ys.iter().map(|y| (y - lo) / (hi - lo)).collect();

    // Deterministic shuffle, then ceil(3n/4) / floor(n/4) split.
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    let mut shuffle_rng = seeds::rng_from(seeds::mix(&[seed, seeds::hash_label("split")]));
    order.shuffle(&mut shuffle_rng);
    let n_train = 3usize.checked_mul(n).unwrap().div_ceil(4);
    let take = |idx: &[usize]| TrainingPairs {
        xs: idx.iter().map(|&i| xs[i].clone()).collect(),
        ys: idx.iter().map(|&i| ys[i]).collect(),
    };
    Ok(InstanceData {
        instance_id: instance.id().to_string(),
        train: take(&order[..n_train]),
        valid: take(&order[n_train..]),
    })
}

/// Training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NirHyper {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for NirHyper {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 5e-4,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
        }
    }
}

/// Validation losses of one instance.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ValidationLosses {
    pub reconstruction: f64,
    pub prediction: f64,
}

/// Summary of a training run. `history[0]` is the validation loss before
/// any update.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub history: Vec<f64>,
    pub per_instance: Vec<ValidationLosses>,
}

/// Gradients of the joint loss for one batch.
pub struct NirGradients {
    pub encoder: Vec<f32>,
    pub decoder: Vec<f32>,
    pub hypernet: Vec<f32>,
    pub embedding: Vec<f32>,
}

/// Loss terms of one batch (means over the batch; KL summed over latent
/// dimensions per sample, then averaged).
#[derive(Clone, Copy, Debug, Default)]
pub struct NirLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub prediction: f64,
    pub kl: f64,
}

struct ChunkOut {
    recon_sum: f64,
    pred_sum: f64,
    kl_sum: f64,
    enc_g: Vec<f32>,
    dec_g: Vec<f32>,
    scorer_wg: Vec<f32>,
}

/// Joint loss and exact gradients for a batch of samples of one instance.
/// `eps` supplies the latent noise (one value per sample and latent
/// dimension), which keeps the pass deterministic and testable.
pub fn loss_and_grads(
    shared: &NirShared,
    embedding: &[f32],
    xs: &[BitString],
    ys: &[f64],
    eps: &[f32],
    hyper: &NirHyper,
) -> Result<(NirLoss, NirGradients)> {
    let arch = &shared.arch;
    let d = arch.d_model;
    let d_z = arch.d_z();
    let batch = xs.len();
    if ys.len() != batch || eps.len() != batch * d_z {
        return Err(Error::Shape("batch arrays disagree".into()));
    }
    let scorer_spec = arch.scorer_spec();
    let scorer_params = shared.materialize_scorer(embedding)?;
    let inv_b = 1.0 / batch as f32;
    let lambda1 = hyper.lambda1 as f32;
    let lambda2 = hyper.lambda2 as f32;

    const CHUNK: usize = 64;
    let chunk_count = batch.div_ceil(CHUNK);
    let outputs: Vec<Result<ChunkOut>> = (0..chunk_count)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CHUNK;
            let hi = ((ci + 1) * CHUNK).min(batch);
            let rows = hi - lo;

            let mut x_emb = Vec::with_capacity(rows * d);
            for x in &xs[lo..hi] {
                x_emb.extend(embed_input(x, d));
            }
            let enc_cache =
                forward_batch(&shared.encoder.spec, &shared.encoder.params, &x_emb, rows)?;
            let enc_out = enc_cache.output();

            let mut mu = vec![0.0f32; rows * d_z];
            let mut lv = vec![0.0f32; rows * d_z];
            let mut sigma = vec![0.0f32; rows * d_z];
            for b in 0..rows {
                let row = &enc_out[b * 2 * d_z..(b + 1) * 2 * d_z];
                mu[b * d_z..(b + 1) * d_z].copy_from_slice(&row[..d_z]);
                lv[b * d_z..(b + 1) * d_z].copy_from_slice(&row[d_z..]);
            }
            for i in 0..rows * d_z {
                sigma[i] = (0.5 * lv[i]).exp();
            }
            let eps_rows = &eps[lo * d_z..hi * d_z];
            let z: Vec<f32> = (0..rows * d_z)
                .map(|i| mu[i] + sigma[i] * eps_rows[i])
                .collect();

            let dec_cache = forward_batch(&shared.decoder.spec, &shared.decoder.params, &z, rows)?;
            let x_recon = dec_cache.output();

            let mut scorer_in = Vec::with_capacity(rows * 2 * d_z);
            for b in 0..rows {
                scorer_in.extend_from_slice(&mu[b * d_z..(b + 1) * d_z]);
                scorer_in.extend_from_slice(&sigma[b * d_z..(b + 1) * d_z]);
            }
            let sc_cache = forward_batch(&scorer_spec, &scorer_params, &scorer_in, rows)?;
            let y_pred = sc_cache.output();

            // Loss terms.
            let mut recon_sum = 0.0f64;
            for i in 0..rows * d {
                let diff = f64::from(x_recon[i] - x_emb[i]);
                recon_sum += diff * diff;
            }
            recon_sum /= d as f64;
            let mut pred_sum = 0.0f64;
            for b in 0..rows {
                let diff = f64::from(y_pred[b]) - ys[lo + b];
                pred_sum += diff * diff;
            }
            let mut kl_sum = 0.0f64;
            for i in 0..rows * d_z {
                let m = f64::from(mu[i]);
                let l = f64::from(lv[i]);
                kl_sum += 0.5 * (m * m + l.exp() - 1.0 - l);
            }

            // Backward. Upstreams carry the 1/batch mean scaling.
            let d_xrec: Vec<f32> = (0..rows * d)
                .map(|i| 2.0 * (x_recon[i] - x_emb[i]) / d as f32 * inv_b)
                .collect();
            let dec_grads = backward_batch(
                &shared.decoder.spec,
                &shared.decoder.params,
                &dec_cache,
                &d_xrec,
            )?;
            let dz = dec_grads.input;

            let d_ypred: Vec<f32> = (0..rows)
                .map(|b| 2.0 * lambda1 * (y_pred[b] - ys[lo + b] as f32) * inv_b)
                .collect();
            let sc_grads = backward_batch(&scorer_spec, &scorer_params, &sc_cache, &d_ypred)?;

            let mut enc_upstream = vec![0.0f32; rows * 2 * d_z];
            for b in 0..rows {
                for j in 0..d_z {
                    let i = b * d_z + j;
                    let d_mu = dz[i] + sc_grads.input[b * 2 * d_z + j] + lambda2 * mu[i] * inv_b;
                    let d_sigma = dz[i] * eps_rows[i] + sc_grads.input[b * 2 * d_z + d_z + j];
                    let d_lv =
                        d_sigma * sigma[i] * 0.5 + lambda2 * 0.5 * ((lv[i]).exp() - 1.0) * inv_b;
                    enc_upstream[b * 2 * d_z + j] = d_mu;
                    enc_upstream[b * 2 * d_z + d_z + j] = d_lv;
                }
            }
            let enc_grads = backward_batch(
                &shared.encoder.spec,
                &shared.encoder.params,
                &enc_cache,
                &enc_upstream,
            )?;

            Ok(ChunkOut {
                recon_sum,
                pred_sum,
                kl_sum,
                enc_g: enc_grads.params,
                dec_g: dec_grads.params,
                scorer_wg: sc_grads.params,
            })
        })
        .collect();

    let mut recon = 0.0;
    let mut pred = 0.0;
    let mut kl = 0.0;
    let mut enc_g = vec![0.0f32; shared.encoder.params.len()];
    let mut dec_g = vec![0.0f32; shared.decoder.params.len()];
    let mut scorer_wg = vec![0.0f32; scorer_params.len()];
    for out in outputs {
        let out = out?;
        recon += out.recon_sum;
        pred += out.pred_sum;
        kl += out.kl_sum;
        for (a, b) in enc_g.iter_mut().zip(&out.enc_g) {
            *a += b;
        }
        for (a, b) in dec_g.iter_mut().zip(&out.dec_g) {
            *a += b;
        }
        for (a, b) in scorer_wg.iter_mut().zip(&out.scorer_wg) {
            *a += b;
        }
    }
    recon /= batch as f64;
    pred /= batch as f64;
    kl /= batch as f64;
    let loss = NirLoss {
        total: recon + hyper.lambda1 * pred + hyper.lambda2 * kl,
        reconstruction: recon,
        prediction: pred,
        kl,
    };

    // Scorer weight gradients flow through the hypernetwork into its
    // parameters and the embedding.
    let hyp_cache = forward_batch(&shared.hypernet.spec, &shared.hypernet.params, embedding, 1)?;
    let hyp_grads = backward_batch(
        &shared.hypernet.spec,
        &shared.hypernet.params,
        &hyp_cache,
        &scorer_wg,
    )?;

    Ok((
        loss,
        NirGradients {
            encoder: enc_g,
            decoder: dec_g,
            hypernet: hyp_grads.params,
            embedding: hyp_grads.input,
        },
    ))
}

/// Deterministic validation losses of one instance over a pair set.
pub fn validation_losses(
    shared: &NirShared,
    embedding: &[f32],
    pairs: &TrainingPairs,
) -> Result<ValidationLosses> {
    let arch = &shared.arch;
    let d = arch.d_model;
    let d_z = arch.d_z();
    let scorer_params = shared.materialize_scorer(embedding)?;
    let scorer_spec = arch.scorer_spec();
    let mut recon = 0.0f64;
    let mut pred = 0.0f64;
    const CHUNK: usize = 512;
    for (xs, ys) in pairs.xs.chunks(CHUNK).zip(pairs.ys.chunks(CHUNK)) {
        let rows = xs.len();
        let mut x_emb = Vec::with_capacity(rows * d);
        for x in xs {
            x_emb.extend(embed_input(x, d));
        }
        let enc_out = shared.encoder.infer_batch(&x_emb, rows)?;
        let mut mu = Vec::with_capacity(rows * d_z);
        let mut scorer_in = Vec::with_capacity(rows * 2 * d_z);
        for b in 0..rows {
            let row = &enc_out[b * 2 * d_z..(b + 1) * 2 * d_z];
            mu.extend_from_slice(&row[..d_z]);
            scorer_in.extend_from_slice(&row[..d_z]);
            scorer_in.extend(row[d_z..].iter().map(|&lv| (0.5 * lv).exp()));
        }
        let x_recon = shared.decoder.infer_batch(&mu, rows)?;
        for i in 0..rows * d {
            let diff = f64::from(x_recon[i] - x_emb[i]);
            recon += diff * diff / d as f64;
        }
        let y_pred = infer_batch(&scorer_spec, &scorer_params, &scorer_in, rows)?;
        for b in 0..rows {
            let diff = f64::from(y_pred[b]) - ys[b];
            pred += diff * diff;
        }
    }
    let n = pairs.len() as f64;
    Ok(ValidationLosses {
        reconstruction: recon / n,
        prediction: pred / n,
    })
}

/// Jointly train the shared weights and one embedding per instance by
/// minimizing the reconstruction + prediction + KL loss over all instances'
/// training pairs. Stops at the epoch limit or when the validation loss
/// plateaus.
pub fn train_nirs(
    arch: &NirArch,
    data: &[InstanceData],
    hyper: &NirHyper,
    seed: u64,
) -> Result<(NirShared, Vec<Vec<f32>>, TrainReport)> {
    assert!(!data.is_empty(), "need at least one instance");
    let mut shared = NirShared::init(arch.clone(), seed);
    let mut embed_rng = seeds::rng_from(seeds::mix(&[seed, seeds::hash_label("embeddings")]));
    let mut embeddings: Vec<Vec<f32>> = (0..data.len())
        .map(|_| shared.sample_embedding(&mut embed_rng))
        .collect();

    let lr = hyper.learning_rate;
    let mut enc_opt = AdamState::new(shared.encoder.params.len(), lr);
    let mut dec_opt = AdamState::new(shared.decoder.params.len(), lr);
    let mut hyp_opt = AdamState::new(shared.hypernet.params.len(), lr);
    let mut emb_opts: Vec<AdamState> = embeddings
        .iter()
        .map(|e| AdamState::new(e.len(), lr))
        .collect();

    let total_valid =
        |shared: &NirShared, embeddings: &[Vec<f32>]| -> Result<(f64, Vec<ValidationLosses>)> {
            let mut per = Vec::with_capacity(data.len());
            let mut total = 0.0;
            for (inst, e) in data.iter().zip(embeddings) {
                let v = validation_losses(shared, e, &inst.valid)?;
                total += v.reconstruction + hyper.lambda1 * v.prediction;
                per.push(v);
            }
            Ok((total / data.len() as f64, per))
        };

    let (initial, mut best_per) = total_valid(&shared, &embeddings)?;
    let mut history = vec![initial];
    let mut best = initial;
    let mut best_state: Option<(NirShared, Vec<Vec<f32>>)> = None;
    let mut stall = 0usize;
    let mut epochs_run = 0usize;
    let d_z = arch.d_z();

    use rand::seq::SliceRandom;
    'outer: for epoch in 0..hyper.max_epochs {
        // Per-epoch sample permutations and an interleaved batch schedule.
        let mut perms: Vec<Vec<usize>> = data
            .iter()
            .map(|inst| (0..inst.train.len()).collect())
            .collect();
        for (i, perm) in perms.iter_mut().enumerate() {
            let mut rng = seeds::rng_from(seeds::stream(
                seed,
                "epoch-perm",
                (epoch * data.len() + i) as u64,
            ));
            perm.shuffle(&mut rng);
        }
        let mut schedule: Vec<(usize, usize, usize)> = Vec::new();
        for (i, inst) in data.iter().enumerate() {
            let mut start = 0;
            while start < inst.train.len() {
                let end = (start + hyper.batch_size).min(inst.train.len());
                schedule.push((i, start, end));
                start = end;
            }
        }
        let mut sched_rng = seeds::rng_from(seeds::stream(seed, "schedule", epoch as u64));
        schedule.shuffle(&mut sched_rng);

        for (batch_no, &(i, start, end)) in schedule.iter().enumerate() {
            let inst = &data[i];
            let idx = &perms[i][start..end];
            let xs: Vec<BitString> = idx.iter().map(|&j| inst.train.xs[j].clone()).collect();
            let ys: Vec<f64> = idx.iter().map(|&j| inst.train.ys[j]).collect();
            let mut eps_rng = seeds::rng_from(seeds::stream(
                seed,
                "latent-noise",
                (epoch * 1_000_000 + batch_no) as u64,
            ));
            let eps: Vec<f32> = (0..xs.len() * d_z)
                .map(|_| {
                    let v: f64 = eps_rng.sample(StandardNormal);
                    v as f32
                })
                .collect();
            let (loss, grads) = loss_and_grads(&shared, &embeddings[i], &xs, &ys, &eps, hyper)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            enc_opt.step(&mut shared.encoder.params, &grads.encoder)?;
            dec_opt.step(&mut shared.decoder.params, &grads.decoder)?;
            hyp_opt.step(&mut shared.hypernet.params, &grads.hypernet)?;
            emb_opts[i].step(&mut embeddings[i], &grads.embedding)?;
        }

        epochs_run = epoch + 1;
        let (valid, per) = total_valid(&shared, &embeddings)?;
        history.push(valid);
        if valid < best {
            best = valid;
            best_per = per;
            best_state = Some((shared.clone(), embeddings.clone()));
            stall = 0;
        } else {
            stall += 1;
            if stall >= hyper.patience {
                break 'outer;
            }
        }
    }

    if let Some((s, e)) = best_state {
        shared = s;
        embeddings = e;
    }
    Ok((
        shared,
        embeddings,
        TrainReport {
            epochs_run,
            history,
            per_instance: best_per,
        },
    ))
}

/// Manifest of an NIR checkpoint directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NirManifest {
    pub arch: NirArch,
    pub lambda1: f64,
    pub lambda2: f64,
    pub instance_ids: Vec<String>,
    pub epochs_run: usize,
    pub per_instance: Vec<ValidationLosses>,
}

/// Write shared weights, one embedding file per instance, and the manifest.
pub fn save_checkpoint(
    dir: &Path,
    shared: &NirShared,
    nirs: &[Nir],
    hyper: &NirHyper,
    report: &TrainReport,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("embeddings"))?;
    write_f32s(&dir.join("encoder.bin"), &shared.encoder.params)?;
    write_f32s(&dir.join("decoder.bin"), &shared.decoder.params)?;
    write_f32s(&dir.join("hypernet.bin"), &shared.hypernet.params)?;
    for nir in nirs {
        write_f32s(
            &dir.join("embeddings")
                .join(format!("{}.bin", sanitize(&nir.id))),
            &nir.embedding,
        )?;
    }
    let manifest = NirManifest {
        arch: shared.arch.clone(),
        lambda1: hyper.lambda1,
        lambda2: hyper.lambda2,
        instance_ids: nirs.iter().map(|n| n.id.clone()).collect(),
        epochs_run: report.epochs_run,
        per_instance: report.per_instance.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a checkpoint produced by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(Arc<NirShared>, Vec<Nir>, NirManifest)> {
    let manifest: NirManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let arch = manifest.arch.clone();
    let encoder = DenseNet::from_params(arch.encoder_spec(), read_f32s(&dir.join("encoder.bin"))?)?;
    let decoder = DenseNet::from_params(arch.decoder_spec(), read_f32s(&dir.join("decoder.bin"))?)?;
    let hypernet =
        DenseNet::from_params(arch.hypernet_spec(), read_f32s(&dir.join("hypernet.bin"))?)?;
    let shared = Arc::new(NirShared {
        arch,
        encoder,
        decoder,
        hypernet,
    });
    let nirs = manifest
        .instance_ids
        .iter()
        .map(|id| {
            let path = dir.join("embeddings").join(format!("{}.bin", sanitize(id)));
            Ok(Nir::new(shared.clone(), read_f32s(&path)?, id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((shared, nirs, manifest))
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
