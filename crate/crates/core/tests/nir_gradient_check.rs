//! End-to-end gradient check of the joint surrogate loss: reconstruction +
//! weighted prediction + weighted KL, differentiated through the decoder,
//! scorer, hypernetwork and encoder into the shared weights and the
//! instance embedding, against central finite differences on an independent
//! f64 reference.

mod common;

use common::{ref_forward, widen};
use papforge::nir::{embed_input, loss_and_grads, NirArch, NirHyper, NirShared};
use papforge::problems::BitString;
use papforge::seeds;
use rand::Rng;

struct RefLoss<'a> {
    arch: &'a NirArch,
    x_emb: Vec<f64>,
    y: f64,
    eps: Vec<f64>,
    lambda1: f64,
    lambda2: f64,
}

impl RefLoss<'_> {
    /// theta = encoder | decoder | hypernet | embedding.
    fn eval(&self, theta: &[f64]) -> f64 {
        let enc_spec = self.arch.encoder_spec();
        let dec_spec = self.arch.decoder_spec();
        let hyp_spec = self.arch.hypernet_spec();
        let scorer_spec = self.arch.scorer_spec();
        let d_z = self.arch.d_z();

        let (enc_p, rest) = theta.split_at(enc_spec.param_count());
        let (dec_p, rest) = rest.split_at(dec_spec.param_count());
        let (hyp_p, emb) = rest.split_at(hyp_spec.param_count());

        let enc_out = ref_forward(&enc_spec, enc_p, &self.x_emb);
        let mu = &enc_out[..d_z];
        let lv = &enc_out[d_z..];
        let sigma: Vec<f64> = lv.iter().map(|&l| (0.5 * l).exp()).collect();
        let z: Vec<f64> = mu
            .iter()
            .zip(&sigma)
            .zip(&self.eps)
            .map(|((&m, &s), &e)| m + s * e)
            .collect();
        let x_rec = ref_forward(&dec_spec, dec_p, &z);
        let recon = self
            .x_emb
            .iter()
            .zip(&x_rec)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.x_emb.len() as f64;

        let w_s = ref_forward(&hyp_spec, hyp_p, emb);
        let scorer_in: Vec<f64> = mu.iter().chain(&sigma).copied().collect();
        let y_pred = ref_forward(&scorer_spec, &w_s, &scorer_in)[0];
        let pred = (y_pred - self.y) * (y_pred - self.y);

        let kl: f64 = mu
            .iter()
            .zip(lv)
            .map(|(&m, &l)| 0.5 * (m * m + l.exp() - 1.0 - l))
            .sum();

        recon + self.lambda1 * pred + self.lambda2 * kl
    }
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    let h = 1e-6;
    let hyper = NirHyper::default();
    for seed in 0..6u64 {
        let mut rng = seeds::rng_from(seeds::mix(&[811, seed]));
        let d_model = rng.random_range(3..=6);
        let arch = NirArch::tiny(d_model, 8, 4);
        let shared = NirShared::init(arch.clone(), seed);
        let embedding: Vec<f32> = (0..4)
            .map(|_| rng.random_range(-1.0..1.0f64) as f32)
            .collect();
        let x = BitString::random(d_model, &mut rng);
        let y: f64 = rng.random_range(0.0..1.0);
        let eps32: Vec<f32> = (0..arch.d_z())
            .map(|_| rng.random_range(-1.5..1.5f64) as f32)
            .collect();

        let (_, grads) = loss_and_grads(
            &shared,
            &embedding,
            std::slice::from_ref(&x),
            &[y],
            &eps32,
            &hyper,
        )
        .unwrap();
        let analytic: Vec<f64> = grads
            .encoder
            .iter()
            .chain(&grads.decoder)
            .chain(&grads.hypernet)
            .chain(&grads.embedding)
            .map(|&g| f64::from(g))
            .collect();

        let mut theta = widen(&shared.encoder.params);
        theta.extend(widen(&shared.decoder.params));
        theta.extend(widen(&shared.hypernet.params));
        theta.extend(widen(&embedding));
        assert_eq!(theta.len(), analytic.len());

        let reference = RefLoss {
            arch: &arch,
            x_emb: embed_input(&x, d_model)
                .iter()
                .map(|&v| f64::from(v))
                .collect(),
            y,
            eps: eps32.iter().map(|&v| f64::from(v)).collect(),
            lambda1: hyper.lambda1,
            lambda2: hyper.lambda2,
        };

        let scale = analytic
            .iter()
            .fold(0.0f64, |a, g| a.max(g.abs()))
            .max(1e-8);
        let mut worst = 0.0f64;
        let mut checked = 0usize;
        for idx in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let f0 = reference.eval(&theta);
            let fp = reference.eval(&plus);
            let fm = reference.eval(&minus);
            let d_plus = (fp - f0) / h;
            let d_minus = (f0 - fm) / h;
            // A kink of the piecewise-linear activations between the probe
            // points makes the finite difference meaningless; skip those.
            if (d_plus - d_minus).abs() > 0.1 * d_plus.abs().max(d_minus.abs()).max(1e-6) {
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let err = (analytic[idx] - fd).abs() / fd.abs().max(scale * 1e-3);
            worst = worst.max(err);
            checked += 1;
        }
        assert!(
            checked > theta.len() * 9 / 10,
            "seed {seed}: too many kink skips ({checked}/{})",
            theta.len()
        );
        assert!(
            worst < 1e-3,
            "seed {seed}: max relative error {worst:.3e} over {checked} coords"
        );
    }
}

#[test]
fn embedding_gradient_alone_matches_finite_differences() {
    let h = 1e-6;
    let hyper = NirHyper::default();
    let mut rng = seeds::rng_from(313);
    let arch = NirArch::tiny(5, 8, 6);
    let shared = NirShared::init(arch.clone(), 77);
    let embedding: Vec<f32> = (0..6)
        .map(|_| rng.random_range(-1.0..1.0f64) as f32)
        .collect();
    let x = BitString::random(5, &mut rng);
    let eps32 = vec![0.25f32; 5];
    let y = 0.6;

    let (_, grads) = loss_and_grads(
        &shared,
        &embedding,
        std::slice::from_ref(&x),
        &[y],
        &eps32,
        &hyper,
    )
    .unwrap();

    let reference = RefLoss {
        arch: &arch,
        x_emb: embed_input(&x, 5).iter().map(|&v| f64::from(v)).collect(),
        y,
        eps: eps32.iter().map(|&v| f64::from(v)).collect(),
        lambda1: hyper.lambda1,
        lambda2: hyper.lambda2,
    };
    let mut theta = widen(&shared.encoder.params);
    theta.extend(widen(&shared.decoder.params));
    theta.extend(widen(&shared.hypernet.params));
    theta.extend(widen(&embedding));
    let emb_offset = theta.len() - 6;

    for j in 0..6 {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[emb_offset + j] += h;
        minus[emb_offset + j] -= h;
        let fd = (reference.eval(&plus) - reference.eval(&minus)) / (2.0 * h);
        let got = f64::from(grads.embedding[j]);
        let err = (got - fd).abs() / fd.abs().max(1e-5);
        assert!(err < 1e-3, "coord {j}: analytic {got} vs fd {fd}");
    }
}
