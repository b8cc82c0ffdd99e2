//! The three projection learners and their losses.
//!
//! All losses reduce over a batch by taking the mean of per-sample squared
//! L2 norms, so the weights `ω`, `α` and `β` do not depend on batch size.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dense_stack, init_network, mse_with_grad, Gradients, Mode, Network};

pub const LATENT_DIM: usize = 2;
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

pub const DEFAULT_OMEGA: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureTag {
    /// Independent projector and reconstructor.
    Pr,
    /// Autoencoder with latent loss.
    Ael,
    /// Variational autoencoder with latent loss.
    Vael,
}

impl ArchitectureTag {
    pub const ALL: [ArchitectureTag; 3] = [ArchitectureTag::Pr, ArchitectureTag::Ael, ArchitectureTag::Vael];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureTag::Pr => "pr",
            ArchitectureTag::Ael => "ael",
            ArchitectureTag::Vael => "vael",
        }
    }
}

impl fmt::Display for ArchitectureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pr" | "p&r" => Ok(ArchitectureTag::Pr),
            "ael" => Ok(ArchitectureTag::Ael),
            "vael" => Ok(ArchitectureTag::Vael),
            _ => Err(Error::InvalidArgument(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub tag: ArchitectureTag,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl ArchitectureSpec {
    /// Default topology `d → 256 → 128 → 64 → 2 → 64 → 128 → 256 → d`.
    pub fn new(tag: ArchitectureTag, input_dim: usize) -> Self {
        ArchitectureSpec {
            tag,
            encoder_hidden: vec![256, 128, 64],
            decoder_hidden: vec![64, 128, 256],
            input_dim,
            latent_dim: LATENT_DIM,
            omega: DEFAULT_OMEGA,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }

    pub fn with_hidden(mut self, encoder: Vec<usize>, decoder: Vec<usize>) -> Self {
        self.encoder_hidden = encoder;
        self.decoder_hidden = decoder;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim != LATENT_DIM {
            return Err(Error::InvalidArgument(format!(
                "latent dimension must be {LATENT_DIM}, got {}",
                self.latent_dim
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be at least 1".into()));
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&w| w == 0) {
            return Err(Error::InvalidArgument("hidden widths must be at least 1".into()));
        }
        for (name, v) in [("omega", self.omega), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Width of the encoder's final layer: the 2D latent, or `(μ, log σ²)` for VAEL.
    pub fn encoder_output_dim(&self) -> usize {
        match self.tag {
            ArchitectureTag::Vael => 2 * self.latent_dim,
            _ => self.latent_dim,
        }
    }
}

/// Encoder/decoder pair. For P&R these are the projector and reconstructor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelNets {
    pub encoder: Network,
    pub decoder: Network,
}

impl ModelNets {
    pub fn init(spec: &ArchitectureSpec, dropout: f64, encoder_seed: u64, decoder_seed: u64) -> Result<Self> {
        spec.validate()?;
        let encoder = init_network(
            &dense_stack(spec.input_dim, &spec.encoder_hidden, spec.encoder_output_dim(), dropout),
            encoder_seed,
        )?;
        let decoder = init_network(
            &dense_stack(spec.latent_dim, &spec.decoder_hidden, spec.input_dim, dropout),
            decoder_seed,
        )?;
        Ok(ModelNets { encoder, decoder })
    }

    /// Deterministic latent coordinates for standardized inputs (`μ` for VAEL).
    pub fn encode_standardized(&self, tag: ArchitectureTag, x: &Array2<f64>) -> Result<Array2<f64>> {
        let out = self.encoder.predict(x)?;
        Ok(match tag {
            ArchitectureTag::Vael => out.slice(s![.., ..LATENT_DIM]).to_owned(),
            _ => out,
        })
    }

    pub fn decode_standardized(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        self.decoder.predict(y)
    }
}

/// Mean over samples of `‖a_i − b_i‖²`.
pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    mse_with_grad(a, b).map(|(v, _)| v)
}

/// `½ Σ_j (μ_j² + σ_j² − 1 − ln σ_j²)`, the KL divergence from `N(μ, σ²)` to `N(0, I)`.
pub fn kl_diag_gaussian(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Batch of `(μ, log σ²)` rows emitted by the VAEL encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VaelHead {
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
}

impl VaelHead {
    /// Splits a raw `B × 4` encoder output, clamping `log σ²` to `[-10, 10]`.
    pub fn from_encoder_output(out: &Array2<f64>) -> Self {
        VaelHead {
            mu: out.slice(s![.., ..LATENT_DIM]).to_owned(),
            log_var: out
                .slice(s![.., LATENT_DIM..])
                .mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)),
        }
    }

    /// Batch mean of the per-sample KL term.
    pub fn mean_kl(&self) -> f64 {
        let total: f64 = self
            .mu
            .rows()
            .into_iter()
            .zip(self.log_var.rows())
            .map(|(m, lv)| kl_diag_gaussian(&m.to_vec(), &lv.to_vec()))
            .sum();
        total / self.mu.nrows().max(1) as f64
    }
}

/// `ŷ = μ + exp(½ log σ²) ⊙ ε`.
pub fn reparameterize(head: &VaelHead, epsilon: &Array2<f64>) -> Result<Array2<f64>> {
    if epsilon.dim() != head.mu.dim() {
        return Err(Error::Shape(format!(
            "epsilon {:?} does not match head {:?}",
            epsilon.dim(),
            head.mu.dim()
        )));
    }
    let mut out = head.mu.clone();
    Zip::from(&mut out)
        .and(&head.log_var)
        .and(epsilon)
        .for_each(|y, &lv, &e| *y += (0.5 * lv).exp() * e);
    Ok(out)
}

pub fn loss_pr_projector(x: &Array2<f64>, y_ref: &Array2<f64>, projector: &Network) -> Result<f64> {
    mse(y_ref, &projector.predict(x)?)
}

pub fn loss_pr_reconstructor(y_ref: &Array2<f64>, x: &Array2<f64>, reconstructor: &Network) -> Result<f64> {
    mse(x, &reconstructor.predict(y_ref)?)
}

/// `MSE(x, x̂) + ω·MSE(y, ŷ)`.
pub fn loss_ael(x: &Array2<f64>, x_hat: &Array2<f64>, y_ref: &Array2<f64>, y_hat: &Array2<f64>, omega: f64) -> Result<f64> {
    Ok(mse(x, x_hat)? + omega * mse(y_ref, y_hat)?)
}

/// `MSE(x, x̂) + α·MSE(y, ŷ) + β·KL(N(μ, σ²) ‖ N(0, I))`.
pub fn loss_vael(
    x: &Array2<f64>,
    x_hat: &Array2<f64>,
    y_ref: &Array2<f64>,
    y_sampled: &Array2<f64>,
    head: &VaelHead,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    Ok(mse(x, x_hat)? + alpha * mse(y_ref, y_sampled)? + beta * head.mean_kl())
}

/// Loss value of one batch split into its weighted terms' raw values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    /// Reconstruction MSE (P&R: reconstructor loss).
    pub reconstruction: f64,
    /// Latent MSE against the reference projection (P&R: projector loss).
    pub latent: f64,
    /// Mean KL divergence (VAEL only).
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct Pass {
    pub loss: LossParts,
    pub encoder_grads: Gradients,
    pub decoder_grads: Gradients,
}

/// One train-mode pass of a standalone network against `target`.
pub fn supervised_pass<R: Rng + ?Sized>(
    net: &mut Network,
    input: &Array2<f64>,
    target: &Array2<f64>,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let (out, tape) = net.forward(input, Mode::Train, rng)?;
    let (loss, g) = mse_with_grad(&out, target)?;
    let (_, grads) = net.backward(&tape, &g)?;
    Ok((loss, grads))
}

/// End-to-end AEL pass: `ŷ = Enc(x)`, `x̂ = Dec(ŷ)`.
pub fn ael_pass<R: Rng + ?Sized>(
    nets: &mut ModelNets,
    x: &Array2<f64>,
    y_ref: &Array2<f64>,
    omega: f64,
    rng: &mut R,
) -> Result<Pass> {
    let (y_hat, enc_tape) = nets.encoder.forward(x, Mode::Train, rng)?;
    let (x_hat, dec_tape) = nets.decoder.forward(&y_hat, Mode::Train, rng)?;
    let (rec, g_x_hat) = mse_with_grad(&x_hat, x)?;
    let (lat, g_lat) = mse_with_grad(&y_hat, y_ref)?;
    let (g_y_hat, decoder_grads) = nets.decoder.backward(&dec_tape, &g_x_hat)?;
    let g_y_hat = g_y_hat + &(g_lat * omega);
    let (_, encoder_grads) = nets.encoder.backward(&enc_tape, &g_y_hat)?;
    Ok(Pass {
        loss: LossParts {
            total: rec + omega * lat,
            reconstruction: rec,
            latent: lat,
            kl: 0.0,
        },
        encoder_grads,
        decoder_grads,
    })
}

/// End-to-end VAEL pass with externally drawn `ε` (one row per sample).
pub fn vael_pass<R: Rng + ?Sized>(
    nets: &mut ModelNets,
    x: &Array2<f64>,
    y_ref: &Array2<f64>,
    alpha: f64,
    beta: f64,
    epsilon: &Array2<f64>,
    rng: &mut R,
) -> Result<Pass> {
    let (raw, enc_tape) = nets.encoder.forward(x, Mode::Train, rng)?;
    if raw.ncols() != 2 * LATENT_DIM {
        return Err(Error::Shape(format!(
            "VAEL encoder must emit {} columns, got {}",
            2 * LATENT_DIM,
            raw.ncols()
        )));
    }
    let head = VaelHead::from_encoder_output(&raw);
    let y_sampled = reparameterize(&head, epsilon)?;
    let (x_hat, dec_tape) = nets.decoder.forward(&y_sampled, Mode::Train, rng)?;
    let (rec, g_x_hat) = mse_with_grad(&x_hat, x)?;
    let (lat, g_lat) = mse_with_grad(&y_sampled, y_ref)?;
    let kl = head.mean_kl();

    let (g_y, decoder_grads) = nets.decoder.backward(&dec_tape, &g_x_hat)?;
    let g_y = g_y + &(g_lat * alpha);
    let b = x.nrows() as f64;
    // ∂ŷ/∂μ = 1, ∂ŷ/∂lv = ½σε; ∂KL/∂μ = μ, ∂KL/∂lv = ½(σ² − 1)
    let g_mu = &g_y + &(&head.mu * (beta / b));
    let raw_lv = raw.slice(s![.., LATENT_DIM..]);
    let mut g_lv = Array2::zeros(head.log_var.raw_dim());
    Zip::from(&mut g_lv)
        .and(&g_y)
        .and(&head.log_var)
        .and(&raw_lv)
        .and(epsilon)
        .for_each(|g, &gy, &lv, &r, &e| {
            *g = if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&r) {
                gy * 0.5 * (0.5 * lv).exp() * e + beta * 0.5 * (lv.exp() - 1.0) / b
            } else {
                0.0
            };
        });
    let g_raw = concatenate(Axis(1), &[g_mu.view(), g_lv.view()]).expect("matching rows");
    let (_, encoder_grads) = nets.encoder.backward(&enc_tape, &g_raw)?;
    Ok(Pass {
        loss: LossParts {
            total: rec + alpha * lat + beta * kl,
            reconstruction: rec,
            latent: lat,
            kl,
        },
        encoder_grads,
        decoder_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::compare;
    use crate::nn::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
    }

    fn small_spec(tag: ArchitectureTag, d: usize) -> ArchitectureSpec {
        ArchitectureSpec::new(tag, d).with_hidden(vec![6, 5], vec![5, 7])
    }

    #[test]
    fn mse_examples() {
        let z = Array2::<f64>::zeros((1, 2));
        let o = Array2::<f64>::ones((1, 2));
        assert_eq!(mse(&z, &z).unwrap(), 0.0);
        assert_eq!(mse(&z, &o).unwrap(), 2.0);
        let a = Array2::from_shape_vec((2, 1), vec![0.0, 0.0]).unwrap();
        let b = Array2::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 5.0);
        assert!(mse(&a, &o).is_err());
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_diag_gaussian(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_diag_gaussian(&[1.0, 0.0], &[0.0, 0.0]) - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let mu = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let lv = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            assert!(kl_diag_gaussian(&mu, &lv) >= 0.0);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mu, lv) = ([0.7, -1.2], [0.4, -0.8]);
        let log_normal = |z: f64, m: f64, var: f64| -0.5 * ((z - m).powi(2) / var + var.ln() + (2.0 * std::f64::consts::PI).ln());
        let samples = 100_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            for j in 0..2 {
                let var = f64::exp(lv[j]);
                let z = mu[j] + var.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                acc += log_normal(z, mu[j], var) - log_normal(z, 0.0, 1.0);
            }
        }
        let mc = acc / samples as f64;
        let exact = kl_diag_gaussian(&mu, &lv);
        assert!((mc - exact).abs() / exact < 0.01, "mc {mc} exact {exact}");
    }

    #[test]
    fn reparameterization_examples() {
        let head = VaelHead {
            mu: Array2::from_shape_vec((1, 2), vec![0.3, -0.4]).unwrap(),
            log_var: Array2::zeros((1, 2)),
        };
        assert_eq!(reparameterize(&head, &Array2::zeros((1, 2))).unwrap(), head.mu);
        let e = Array2::from_shape_vec((1, 2), vec![1.0, -1.0]).unwrap();
        let y = reparameterize(&head, &e).unwrap();
        assert!((y[[0, 0]] - 1.3).abs() < 1e-15 && (y[[0, 1]] + 1.4).abs() < 1e-15);
        assert!(reparameterize(&head, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn reparameterized_samples_center_on_mu() {
        let n = 100_000;
        let mu = [1.5, -0.5];
        let lv = [0.2f64, -1.0];
        let head = VaelHead {
            mu: Array2::from_shape_fn((n, 2), |(_, j)| mu[j]),
            log_var: Array2::from_shape_fn((n, 2), |(_, j)| lv[j]),
        };
        let eps = randn(n, 2, &mut ChaCha8Rng::seed_from_u64(11));
        let y = reparameterize(&head, &eps).unwrap();
        let mean = y.mean_axis(Axis(0)).unwrap();
        for j in 0..2 {
            let se = (0.5 * lv[j]).exp() / (n as f64).sqrt();
            assert!((mean[j] - mu[j]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn ael_loss_examples() {
        let x = Array2::from_shape_vec((1, 2), vec![1.0, 2.0]).unwrap();
        let y = Array2::from_shape_vec((1, 2), vec![0.5, -0.5]).unwrap();
        assert_eq!(loss_ael(&x, &x, &y, &y, 0.5).unwrap(), 0.0);
        let x_hat = &x + 0.5;
        let y_hat = &y + 1.0;
        assert_eq!(loss_ael(&x, &x_hat, &y, &y_hat, 0.0).unwrap(), mse(&x, &x_hat).unwrap());
        // rec 0.2, latent 0.4, ω 0.5
        let xr = Array2::from_shape_vec((1, 1), vec![0.2f64.sqrt()]).unwrap();
        let yl = Array2::from_shape_vec((1, 1), vec![0.4f64.sqrt()]).unwrap();
        let z = Array2::zeros((1, 1));
        assert!((loss_ael(&z, &xr, &z, &yl, 0.5).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn vael_loss_collapses_to_ael_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(5, 3, &mut rng);
        let x_hat = randn(5, 3, &mut rng);
        let y_ref = randn(5, 2, &mut rng);
        let head = VaelHead {
            mu: randn(5, 2, &mut rng),
            log_var: Array2::from_elem((5, 2), LOG_VAR_MIN),
        };
        let eps = randn(5, 2, &mut rng);
        let sampled = reparameterize(&head, &eps).unwrap();
        let v = loss_vael(&x, &x_hat, &y_ref, &sampled, &head, 1.0, 0.0).unwrap();
        let a = loss_ael(&x, &x_hat, &y_ref, &head.mu, 1.0).unwrap();
        // σ = e^-5 leaves only a small residual
        assert!((v - a).abs() < 0.05 * a, "{v} vs {a}");
        let sampled0 = reparameterize(&head, &Array2::zeros((5, 2))).unwrap();
        assert_eq!(loss_vael(&x, &x_hat, &y_ref, &sampled0, &head, 1.0, 0.0).unwrap(), a);
    }

    #[test]
    fn vael_loss_positive_for_nonzero_reference() {
        let x = Array2::zeros((1, 2));
        let y_ref = Array2::from_shape_vec((1, 2), vec![0.3, 0.0]).unwrap();
        for (mu, lv) in [([0.3, 0.0], [0.0, 0.0]), ([0.0, 0.0], [0.0, 0.0]), ([0.3, 0.0], [-10.0, -10.0])] {
            let head = VaelHead {
                mu: Array2::from_shape_vec((1, 2), mu.to_vec()).unwrap(),
                log_var: Array2::from_shape_vec((1, 2), lv.to_vec()).unwrap(),
            };
            let y = reparameterize(&head, &Array2::zeros((1, 2))).unwrap();
            assert!(loss_vael(&x, &x, &y_ref, &y, &head, 1.0, 0.1).unwrap() > 0.0);
        }
    }

    #[test]
    fn projector_and_reconstructor_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(6, 3, &mut rng);
        // a decoder that always emits zero: the loss is the mean squared norm of x
        let zero = Network::new(vec![Layer::affine(Array2::zeros((3, 2)), ndarray::Array1::zeros(3))]).unwrap();
        let y = randn(6, 2, &mut rng);
        let expected = x.rows().into_iter().map(|r| r.dot(&r)).sum::<f64>() / 6.0;
        assert!((loss_pr_reconstructor(&y, &x, &zero).unwrap() - expected).abs() < 1e-12);

        // identity-like projector on 2D input reproduces the target
        let id = Network::new(vec![Layer::affine(Array2::eye(2), ndarray::Array1::zeros(2))]).unwrap();
        assert_eq!(loss_pr_projector(&y, &y, &id).unwrap(), 0.0);

        let nets = ModelNets::init(&small_spec(ArchitectureTag::Pr, 3), 0.25, 1, 2).unwrap();
        assert!(loss_pr_projector(&x, &y, &nets.encoder).unwrap() > 0.0);
    }

    #[test]
    fn spec_validation() {
        let mut s = ArchitectureSpec::new(ArchitectureTag::Ael, 3);
        assert!(s.validate().is_ok());
        s.omega = -1.0;
        assert!(s.validate().is_err());
        let mut s = ArchitectureSpec::new(ArchitectureTag::Ael, 3);
        s.latent_dim = 3;
        assert!(s.validate().is_err());
        assert_eq!("VAEL".parse::<ArchitectureTag>().unwrap(), ArchitectureTag::Vael);
        assert!("x".parse::<ArchitectureTag>().is_err());
    }

    /// Checks every encoder/decoder parameter gradient of a composite loss.
    fn check_composite(
        tag: ArchitectureTag,
        seed: u64,
        run: impl Fn(&mut ModelNets, &mut ChaCha8Rng) -> Pass,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = ModelNets::init(&small_spec(tag, 3), 0.25, seed, seed + 100).unwrap();
        let mask_seed = rng.random::<u64>();
        let total = |n: &ModelNets| run(&mut n.clone(), &mut ChaCha8Rng::seed_from_u64(mask_seed)).loss.total;
        let pass = run(&mut nets.clone(), &mut ChaCha8Rng::seed_from_u64(mask_seed));
        let mut worst: f64 = 0.0;
        for (which, grads) in [(0, &pass.encoder_grads), (1, &pass.decoder_grads)] {
            for (ti, a) in grads.tensors().iter().enumerate() {
                let mut probe = nets.clone();
                fn net(p: &mut ModelNets, which: usize) -> &mut Network {
                    if which == 0 {
                        &mut p.encoder
                    } else {
                        &mut p.decoder
                    }
                }
                let mut values = net(&mut probe, which).params()[ti].to_vec();
                worst = worst.max(compare(&mut values, a, |v| {
                    net(&mut probe, which).params_mut()[ti].copy_from_slice(v);
                    total(&probe)
                }));
            }
        }
        worst
    }

    #[test]
    fn composite_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = randn(4, 3, &mut rng);
        let y = randn(4, 2, &mut rng);
        let eps = randn(4, 2, &mut rng);

        let err = check_composite(ArchitectureTag::Ael, 1, |n, r| ael_pass(n, &x, &y, 0.5, r).unwrap());
        assert!(err < 1e-4, "AEL {err}");
        let err = check_composite(ArchitectureTag::Vael, 2, |n, r| vael_pass(n, &x, &y, 1.0, 0.1, &eps, r).unwrap());
        assert!(err < 1e-4, "VAEL {err}");
        let err = check_composite(ArchitectureTag::Pr, 3, |n, r| {
            let (lp, gp) = supervised_pass(&mut n.encoder, &x, &y, r).unwrap();
            let (lr, gr) = supervised_pass(&mut n.decoder, &y, &x, r).unwrap();
            Pass {
                loss: LossParts { total: lp + lr, reconstruction: lr, latent: lp, kl: 0.0 },
                encoder_grads: gp,
                decoder_grads: gr,
            }
        });
        assert!(err < 1e-4, "P&R {err}");
    }

    #[test]
    fn vael_with_zero_noise_and_beta_equals_ael() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(6, 3, &mut rng);
        let y = randn(6, 2, &mut rng);
        let ael = ModelNets::init(&small_spec(ArchitectureTag::Ael, 3), 0.25, 4, 5).unwrap();
        let mut vael = ModelNets::init(&small_spec(ArchitectureTag::Vael, 3), 0.25, 4, 5).unwrap();
        vael.decoder = ael.decoder.clone();
        share_mu_head(&ael.encoder, &mut vael.encoder);

        let a = ael_pass(&mut ael.clone(), &x, &y, 1.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let v = vael_pass(&mut vael, &x, &y, 1.0, 0.0, &Array2::zeros((6, 2)), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert!((a.loss.total - v.loss.total).abs() <= 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_only_at_the_prior(
            m0 in -4.0f64..4.0, m1 in -4.0f64..4.0, l0 in -10.0f64..10.0, l1 in -10.0f64..10.0,
        ) {
            let kl = kl_diag_gaussian(&[m0, m1], &[l0, l1]);
            proptest::prop_assert!(kl >= 0.0);
            let sep = m0 * m0 + m1 * m1 + l0 * l0 + l1 * l1;
            if sep > 1e-6 {
                proptest::prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn mse_is_symmetric_and_shift_invariant(seed in proptest::prelude::any::<u64>(), rows in 1usize..8, cols in 1usize..5, shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = randn(rows, cols, &mut rng);
            let b = randn(rows, cols, &mut rng);
            let ab = mse(&a, &b).unwrap();
            proptest::prop_assert!(ab >= 0.0);
            proptest::prop_assert!((ab - mse(&b, &a).unwrap()).abs() <= 1e-12 * ab.max(1.0));
            proptest::prop_assert!((ab - mse(&(&a + shift), &(&b + shift)).unwrap()).abs() <= 1e-9 * ab.max(1.0));
            proptest::prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn zero_noise_reparameterization_returns_mu(seed in proptest::prelude::any::<u64>(), rows in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = randn(rows, 4, &mut rng) * 20.0;
            let head = VaelHead::from_encoder_output(&raw);
            proptest::prop_assert!(head.log_var.iter().all(|v| (LOG_VAR_MIN..=LOG_VAR_MAX).contains(v)));
            proptest::prop_assert_eq!(reparameterize(&head, &Array2::zeros((rows, 2))).unwrap(), head.mu.clone());
        }
    }

    /// Copies every AEL encoder parameter into the VAEL encoder; the μ rows of
    /// the final layer take the AEL latent weights.
    pub(crate) fn share_mu_head(ael: &Network, vael: &mut Network) {
        let n = ael.layers().len();
        for (i, (src, dst)) in ael.layers().iter().zip(vael.layers_mut()).enumerate() {
            if i + 1 < n {
                *dst = src.clone();
            } else if let (Layer::Affine { weights: ws, bias: bs }, Layer::Affine { weights: wd, bias: bd }) = (src, dst) {
                wd.slice_mut(s![..LATENT_DIM, ..]).assign(ws);
                bd.slice_mut(s![..LATENT_DIM]).assign(bs);
            }
        }
    }
}
