//! Closed-form densities, divergences, entropies, and reparameterized
//! samplers used by the variational bounds: the diagonal Gaussian latent
//! posterior (against a standard-normal prior), the categorical classifier
//! output, and the Gumbel-Softmax relaxation of the label.
//!
//! All logarithms are natural. Samplers take explicit noise vectors so that
//! every draw is a pure function of its inputs; noise generation itself lives
//! with the seeded stream discipline in [`crate::rng`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::types::SurvivalClass;

/// Uniform noise is clamped to `[FLOOR, 1 - FLOOR]` before the double log in
/// the Gumbel transform, avoiding infinities with negligible bias.
pub const UNIFORM_FLOOR: f64 = 1e-10;

/// Diagonal Gaussian posterior q(z|·) with mean and log-variance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    mean: Vec<f64>,
    log_variance: Vec<f64>,
}

impl GaussianPosterior {
    /// Build a posterior, checking that both vectors are finite and of equal
    /// length.
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(Error::LengthMismatch {
                what: "gaussian posterior log_variance",
                expected: mean.len(),
                got: log_variance.len(),
            });
        }
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gaussian posterior mean",
            });
        }
        if !log_variance.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gaussian posterior log_variance",
            });
        }
        Ok(Self { mean, log_variance })
    }

    /// Posterior mean μ.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Posterior log-variance log σ².
    pub fn log_variance(&self) -> &[f64] {
        &self.log_variance
    }

    /// Latent dimensionality.
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    /// True when the latent dimension is zero.
    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Categorical classifier output stored as logits; probabilities are the
/// softmax of the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    logits: Vec<f64>,
}

impl ClassPosterior {
    /// Build from raw logits, checking finiteness.
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "class posterior logits",
            });
        }
        Ok(Self { logits })
    }

    /// Raw logits.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Softmax probabilities; strictly positive up to floating-point
    /// underflow, summing to 1.
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Number of classes.
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    /// True when there are no classes.
    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// A point on the open probability simplex produced by the Gumbel-Softmax
/// transform at temperature τ.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedOneHot {
    values: Vec<f64>,
    temperature: f64,
}

impl RelaxedOneHot {
    /// Relaxed sample components; positive and summing to 1.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Temperature τ the sample was drawn at.
    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// log Σ exp(x_i), stabilized by subtracting the maximum.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// KL(q || N(0, I)) = 0.5 Σ_j (μ_j² + σ_j² − 1 − log σ_j²); non-negative,
/// zero exactly at μ=0, logvar=0.
pub fn kl_to_standard_normal(q: &GaussianPosterior) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_variance)
        .map(|(&mu, &lv)| 0.5 * (mu * mu + lv.exp() - 1.0 - lv))
        .sum()
}

/// Reparameterized draw z = μ + exp(logvar/2) ⊙ ε for standard-normal ε.
pub fn gaussian_rsample(q: &GaussianPosterior, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.len() {
        return Err(Error::LengthMismatch {
            what: "gaussian_rsample noise",
            expected: q.len(),
            got: noise.len(),
        });
    }
    Ok(q.mean
        .iter()
        .zip(&q.log_variance)
        .zip(noise)
        .map(|((&mu, &lv), &eps)| mu + (0.5 * lv).exp() * eps)
        .collect())
}

/// Entropy −Σ p log p of a probability vector, with 0·log 0 = 0.
pub fn entropy_of_probabilities(probs: &[f64]) -> f64 {
    probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// Entropy of the classifier posterior, natural log.
pub fn categorical_entropy(p: &ClassPosterior) -> f64 {
    entropy_of_probabilities(&p.probabilities())
}

/// Relaxed one-hot draw: g_i = −log(−log u_i), output = softmax((logits+g)/τ).
///
/// Uniform noise is clamped to [`UNIFORM_FLOOR`, 1 − `UNIFORM_FLOOR`].
pub fn gumbel_softmax_sample(
    logits: &[f64],
    temperature: f64,
    uniform_noise: &[f64],
) -> Result<RelaxedOneHot> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "gumbel-softmax temperature must be positive, got {temperature}"
        )));
    }
    if uniform_noise.len() != logits.len() {
        return Err(Error::LengthMismatch {
            what: "gumbel_softmax_sample noise",
            expected: logits.len(),
            got: uniform_noise.len(),
        });
    }
    let scaled: Vec<f64> = logits
        .iter()
        .zip(uniform_noise)
        .map(|(&l, &u)| {
            let u = u.clamp(UNIFORM_FLOOR, 1.0 - UNIFORM_FLOOR);
            let g = -(-u.ln()).ln();
            (l + g) / temperature
        })
        .collect();
    Ok(RelaxedOneHot {
        values: softmax(&scaled),
        temperature,
    })
}

/// log q(y) under the classifier posterior, computed stably from logits.
pub fn categorical_log_prob(p: &ClassPosterior, y: SurvivalClass) -> f64 {
    p.logits[y.index()] - log_sum_exp(&p.logits)
}

/// Draw `len` independent standard-normal values.
pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draw `len` independent uniform(0,1) values.
pub fn uniform_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random::<f64>()).collect()
}
