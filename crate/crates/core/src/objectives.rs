//! Variational bounds and the training objective.
//!
//! The labeled bound L(x,y) is a single-sample estimate of
//! E_q[log p(x|z,y)] + log p(y) − β·KL(q(z|x,y) ‖ N(0,I)) with log p(y) =
//! −log M_y under the uniform class prior. The unlabeled bound U(x) is
//! Σ_y q(y|x)·L(x,y) + γ·H(q(y|x)); training uses the relaxed
//! (Gumbel-Softmax) estimator, while the exact 3-way marginalization serves
//! as its oracle and an optional runtime mode. The combined objective is
//! J^α = Σ L + Σ U + α·Σ log q(y_i|x_i), a quantity to MAXIMIZE.
//!
//! All bound values are per-record sums over voxels, not means: the
//! published β magnitudes (up to 6×10³) are calibrated against summed
//! reconstruction terms. The −log M_y prior constant is included in
//! reported totals but contributes no gradient. Public bound functions run
//! with dropout off; the gradient entry point used by the trainer draws
//! per-record dropout masks from caller-supplied generators.

use ndarray::{Array4, ArrayD};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::softplus;
use crate::autodiff::{gumbels_from_uniform, Gradients, NodeId, Tape};
use crate::distributions::{
    categorical_entropy, categorical_log_prob, gaussian_rsample, gumbel_softmax_sample,
    kl_to_standard_normal, ClassPosterior, GaussianPosterior,
};
use crate::error::{Error, Result};
use crate::networks::{
    b1_eval, classify_from_f1_eval, decode_logits_eval, encode_from_f1_eval, Dropout, ModelConfig,
    ModelGraph, ModelParams,
};
use crate::volumes::OneHotVolume;
use crate::SurvivalClass;

/// Probabilities are clamped to [ε, 1−ε] before logs in the
/// probability-space reconstruction likelihood.
const PROB_FLOOR: f64 = 1e-12;

/// Reconstruction likelihood family for p(x|z,y).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    /// Independent per-channel Bernoulli factors through the output sigmoid;
    /// matches the published architecture.
    #[default]
    Bernoulli,
    /// Per-voxel categorical softmax across the 4 channels, for comparison.
    Categorical,
}

/// Weights and temperatures of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Classification-loss weight α ≥ 0.
    pub alpha: f64,
    /// KL weight β ≥ 0 (0 admitted during warm-up).
    pub beta: f64,
    /// Entropy weight γ ≥ 1.
    pub gamma: f64,
    /// Gumbel-Softmax temperature τ > 0.
    pub tau: f64,
    /// Number of survival classes M_y.
    pub class_count: usize,
    /// Likelihood family for the reconstruction term.
    #[serde(default)]
    pub likelihood: Likelihood,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!("beta must be ≥ 0, got {}", self.beta)));
        }
        if !self.gamma.is_finite() || self.gamma < 1.0 {
            return Err(Error::InvalidConfig(format!("gamma must be ≥ 1, got {}", self.gamma)));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.class_count == 0 {
            return Err(Error::InvalidConfig("class_count must be positive".into()));
        }
        Ok(())
    }

    /// log p(y) under the uniform class prior.
    fn log_prior(&self) -> f64 {
        -(self.class_count as f64).ln()
    }
}

/// One evaluated bound, decomposed. For every variant
/// `total = reconstruction_term + log p(y) − β·kl_term + γ·entropy_term`,
/// with `entropy_term` 0 for labeled records. `class_log_prob` carries
/// log q(y|x) for labeled records (it is not part of `total`; the combined
/// objective scales it by α) and 0 for unlabeled ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub total: f64,
    pub reconstruction_term: f64,
    pub kl_term: f64,
    pub entropy_term: f64,
    pub class_log_prob: f64,
}

/// α = 10⁻⁵·D with D the voxel count of the given shape.
pub fn alpha_from_dims(shape: [usize; 3]) -> f64 {
    1e-5 * (shape[0] * shape[1] * shape[2]) as f64
}

/// Probability-space reconstruction log-likelihood
/// Σ t·log p + (1−t)·log(1−p) over channels and voxels, for an exact one-hot
/// `target` and decoder probabilities in (0,1) (clamped to [ε, 1−ε]).
pub fn reconstruction_log_likelihood(target: &OneHotVolume, probs: &ArrayD<f64>) -> Result<f64> {
    if target.data().shape() != probs.shape() {
        return Err(Error::ShapeMismatch {
            expected: target.data().shape().to_vec(),
            got: probs.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    ndarray::Zip::from(&target.data().view().into_dyn())
        .and(probs)
        .for_each(|&t, &p| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            total += t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        });
    Ok(total)
}

/// Logit-space Bernoulli log-likelihood; equal to
/// [`reconstruction_log_likelihood`] at p = σ(logits) but immune to sigmoid
/// saturation.
fn bernoulli_value(logits: &ArrayD<f64>, target: &Array4<f64>) -> f64 {
    let mut total = 0.0;
    ndarray::Zip::from(logits)
        .and(&target.view().into_dyn())
        .for_each(|&l, &t| {
            total += t * (-softplus(-l)) + (1.0 - t) * (-softplus(l));
        });
    total
}

/// Per-voxel categorical log-likelihood across the channel axis.
fn categorical_value(logits: &ArrayD<f64>, target: &Array4<f64>) -> f64 {
    let (c, d1, d2, d3) = target.dim();
    let mut total = 0.0;
    for i1 in 0..d1 {
        for i2 in 0..d2 {
            for i3 in 0..d3 {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(logits[[ch, i1, i2, i3]]);
                }
                let lse = m
                    + (0..c)
                        .map(|ch| (logits[[ch, i1, i2, i3]] - m).exp())
                        .sum::<f64>()
                        .ln();
                for ch in 0..c {
                    total += target[[ch, i1, i2, i3]] * (logits[[ch, i1, i2, i3]] - lse);
                }
            }
        }
    }
    total
}

fn validate_record(cfg: &ModelConfig, obj: &ObjectiveConfig, x: &OneHotVolume, noise_z: &[f64]) -> Result<()> {
    obj.validate()?;
    if obj.class_count != cfg.class_count {
        return Err(Error::InvalidConfig(format!(
            "objective class_count {} does not match model class_count {}",
            obj.class_count, cfg.class_count
        )));
    }
    let xs = x.data().shape();
    if xs[0] != cfg.channel_count || [xs[1], xs[2], xs[3]] != cfg.input_shape {
        let mut expected = vec![cfg.channel_count];
        expected.extend_from_slice(&cfg.input_shape);
        return Err(Error::ShapeMismatch { expected, got: xs.to_vec() });
    }
    if noise_z.len() != cfg.latent_size {
        return Err(Error::LengthMismatch {
            what: "latent noise",
            expected: cfg.latent_size,
            got: noise_z.len(),
        });
    }
    Ok(())
}

/// Reconstruction and KL for one (f1, embedding) pairing, tape-free.
fn recon_and_kl(
    cfg: &ModelConfig,
    params: &ModelParams,
    obj: &ObjectiveConfig,
    x: &OneHotVolume,
    f1: &ArrayD<f64>,
    emb: &[f64],
    noise_z: &[f64],
) -> Result<(f64, f64)> {
    let (mu, lv) = encode_from_f1_eval(cfg, params, f1, emb);
    let posterior = GaussianPosterior::new(mu, lv)?;
    let kl = kl_to_standard_normal(&posterior);
    let z = gaussian_rsample(&posterior, noise_z)?;
    let logits = decode_logits_eval(cfg, params, &z, emb);
    let recon = match obj.likelihood {
        Likelihood::Bernoulli => bernoulli_value(&logits, x.data()),
        Likelihood::Categorical => categorical_value(&logits, x.data()),
    };
    Ok((recon, kl))
}

/// Single-sample labeled bound L(x,y), with log q(y|x) reported alongside.
pub fn labeled_bound(
    cfg: &ModelConfig,
    params: &ModelParams,
    obj: &ObjectiveConfig,
    x: &OneHotVolume,
    y: SurvivalClass,
    noise_z: &[f64],
) -> Result<BoundValue> {
    validate_record(cfg, obj, x, noise_z)?;
    if y.index() >= obj.class_count {
        return Err(Error::LabelOutOfRange { value: y.index() as i64 });
    }
    let f1 = b1_eval(params, &x.data().clone().into_dyn());
    let emb = params.embedding_row(y.index());
    let (recon, kl) = recon_and_kl(cfg, params, obj, x, &f1, &emb, noise_z)?;
    let cls = ClassPosterior::from_logits(classify_from_f1_eval(params, &f1))?;
    let class_log_prob = categorical_log_prob(&cls, y);
    Ok(BoundValue {
        total: recon + obj.log_prior() - obj.beta * kl,
        reconstruction_term: recon,
        kl_term: kl,
        entropy_term: 0.0,
        class_log_prob,
    })
}

/// Relaxed unlabeled estimator: one Gumbel-Softmax draw ŷ from the
/// classifier, the labeled bound evaluated through the soft embedding, plus
/// γ·H(q(y|x)).
pub fn unlabeled_bound_relaxed(
    cfg: &ModelConfig,
    params: &ModelParams,
    obj: &ObjectiveConfig,
    x: &OneHotVolume,
    y_uniforms: &[f64],
    noise_z: &[f64],
) -> Result<BoundValue> {
    validate_record(cfg, obj, x, noise_z)?;
    if y_uniforms.len() != obj.class_count {
        return Err(Error::LengthMismatch {
            what: "class-sample uniforms",
            expected: obj.class_count,
            got: y_uniforms.len(),
        });
    }
    let f1 = b1_eval(params, &x.data().clone().into_dyn());
    let logits = classify_from_f1_eval(params, &f1);
    let entropy = categorical_entropy(&ClassPosterior::from_logits(logits.clone())?);
    let yhat = gumbel_softmax_sample(&logits, obj.tau, y_uniforms)?;
    let emb = params.embedding_mix(yhat.values());
    let (recon, kl) = recon_and_kl(cfg, params, obj, x, &f1, &emb, noise_z)?;
    Ok(BoundValue {
        total: recon + obj.log_prior() - obj.beta * kl + obj.gamma * entropy,
        reconstruction_term: recon,
        kl_term: kl,
        entropy_term: entropy,
        class_log_prob: 0.0,
    })
}

/// Exact unlabeled bound: the class sum Σ_y q(y|x)·L(x,y) with shared
/// z-noise across classes, plus γ·H(q(y|x)). The oracle for the relaxed
/// estimator.
pub fn unlabeled_bound_exact(
    cfg: &ModelConfig,
    params: &ModelParams,
    obj: &ObjectiveConfig,
    x: &OneHotVolume,
    noise_z: &[f64],
) -> Result<BoundValue> {
    validate_record(cfg, obj, x, noise_z)?;
    let f1 = b1_eval(params, &x.data().clone().into_dyn());
    let cls = ClassPosterior::from_logits(classify_from_f1_eval(params, &f1))?;
    let q = cls.probabilities();
    let entropy = categorical_entropy(&cls);
    let mut recon_mix = 0.0;
    let mut kl_mix = 0.0;
    for (k, &qk) in q.iter().enumerate() {
        let emb = params.embedding_row(k);
        let (recon, kl) = recon_and_kl(cfg, params, obj, x, &f1, &emb, noise_z)?;
        recon_mix += qk * recon;
        kl_mix += qk * kl;
    }
    Ok(BoundValue {
        total: recon_mix + obj.log_prior() - obj.beta * kl_mix + obj.gamma * entropy,
        reconstruction_term: recon_mix,
        kl_term: kl_mix,
        entropy_term: entropy,
        class_log_prob: 0.0,
    })
}

/// One labeled record plus its per-record noise.
#[derive(Debug, Clone)]
pub struct LabeledItem<'a> {
    pub x: &'a OneHotVolume,
    pub y: SurvivalClass,
    pub noise_z: Vec<f64>,
}

/// One unlabeled record plus its per-record noise.
#[derive(Debug, Clone)]
pub struct UnlabeledItem<'a> {
    pub x: &'a OneHotVolume,
    pub y_uniforms: Vec<f64>,
    pub noise_z: Vec<f64>,
}

/// Per-record dropout generators for [`combined_objective_with_grads`],
/// aligned by index with the labeled and unlabeled batches.
#[derive(Debug, Clone)]
pub struct DropoutRngs {
    pub labeled: Vec<ChaCha12Rng>,
    pub unlabeled: Vec<ChaCha12Rng>,
}

/// J^α = Σ L(x_i,y_i) + Σ U(x_j) + α·Σ log q(y_i|x_i), as a value to
/// maximize. Dropout off; errors if both batches are empty.
pub fn combined_objective(
    cfg: &ModelConfig,
    params: &ModelParams,
    obj: &ObjectiveConfig,
    labeled: &[LabeledItem],
    unlabeled: &[UnlabeledItem],
) -> Result<f64> {
    if labeled.is_empty() && unlabeled.is_empty() {
        return Err(Error::InvalidConfig("objective requires at least one record".into()));
    }
    let mut j = 0.0;
    for item in labeled {
        let b = labeled_bound(cfg, params, obj, item.x, item.y, &item.noise_z)?;
        j += b.total + obj.alpha * b.class_log_prob;
    }
    for item in unlabeled {
        let b = unlabeled_bound_relaxed(cfg, params, obj, item.x, &item.y_uniforms, &item.noise_z)?;
        j += b.total;
    }
    Ok(j)
}

/// Batch component sums for metrics reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundSums {
    pub reconstruction: f64,
    pub kl: f64,
    pub entropy: f64,
    pub class_log_prob: f64,
}

/// Objective value plus parameter gradients for one batch.
pub struct BatchGradients {
    /// J^α for the batch (to maximize).
    pub objective: f64,
    /// Component sums across all records.
    pub sums: BoundSums,
    /// ∂J^α/∂θ, summed over records, aligned with [`ModelParams`].
    pub grads: ModelParams,
}

/// Compute J^α and its parameter gradients via per-record tapes. Records are
/// evaluated in parallel; the reduction runs in batch order (labeled records
/// first), so results are independent of thread count. `dropout`, when
/// given, supplies one mask generator per record.
pub fn combined_objective_with_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    obj: &ObjectiveConfig,
    labeled: &[LabeledItem],
    unlabeled: &[UnlabeledItem],
    dropout: Option<DropoutRngs>,
) -> Result<BatchGradients> {
    if labeled.is_empty() && unlabeled.is_empty() {
        return Err(Error::InvalidConfig("objective requires at least one record".into()));
    }
    for item in labeled {
        validate_record(cfg, obj, item.x, &item.noise_z)?;
        if item.y.index() >= obj.class_count {
            return Err(Error::LabelOutOfRange { value: item.y.index() as i64 });
        }
    }
    for item in unlabeled {
        validate_record(cfg, obj, item.x, &item.noise_z)?;
        if item.y_uniforms.len() != obj.class_count {
            return Err(Error::LengthMismatch {
                what: "class-sample uniforms",
                expected: obj.class_count,
                got: item.y_uniforms.len(),
            });
        }
    }
    let (l_rngs, u_rngs) = match dropout {
        None => (vec![None; labeled.len()], vec![None; unlabeled.len()]),
        Some(d) => {
            if d.labeled.len() != labeled.len() {
                return Err(Error::LengthMismatch {
                    what: "labeled dropout generators",
                    expected: labeled.len(),
                    got: d.labeled.len(),
                });
            }
            if d.unlabeled.len() != unlabeled.len() {
                return Err(Error::LengthMismatch {
                    what: "unlabeled dropout generators",
                    expected: unlabeled.len(),
                    got: d.unlabeled.len(),
                });
            }
            (
                d.labeled.into_iter().map(Some).collect::<Vec<_>>(),
                d.unlabeled.into_iter().map(Some).collect::<Vec<_>>(),
            )
        }
    };

    let labeled_parts: Vec<(f64, BoundValue, Vec<ArrayD<f64>>)> = labeled
        .par_iter()
        .zip(l_rngs.into_par_iter())
        .map(|(item, rng)| labeled_record_grads(cfg, params, obj, item, rng))
        .collect();
    let unlabeled_parts: Vec<(f64, BoundValue, Vec<ArrayD<f64>>)> = unlabeled
        .par_iter()
        .zip(u_rngs.into_par_iter())
        .map(|(item, rng)| unlabeled_record_grads(cfg, params, obj, item, rng))
        .collect();

    let mut objective = 0.0;
    let mut sums = BoundSums::default();
    let mut grads = ModelParams::zeros(cfg)?;
    for (contrib, bound, gvec) in labeled_parts.into_iter().chain(unlabeled_parts) {
        objective += contrib;
        sums.reconstruction += bound.reconstruction_term;
        sums.kl += bound.kl_term;
        sums.entropy += bound.entropy_term;
        sums.class_log_prob += bound.class_log_prob;
        for ((_, slot), g) in grads.visit_mut().into_iter().zip(gvec) {
            *slot += &g;
        }
    }
    Ok(BatchGradients { objective, sums, grads })
}

fn recon_node(tape: &mut Tape, obj: &ObjectiveConfig, dec: NodeId, x: &OneHotVolume) -> NodeId {
    let target = x.data().clone().into_dyn();
    match obj.likelihood {
        Likelihood::Bernoulli => tape.bernoulli_log_lik(dec, target),
        Likelihood::Categorical => tape.categorical_log_lik(dec, target),
    }
}

fn collect_grads(tape: &Tape, graph: &ModelGraph, mut grads: Gradients) -> Vec<ArrayD<f64>> {
    graph
        .param_ids()
        .into_iter()
        .map(|(_, id)| {
            grads
                .take(id)
                .unwrap_or_else(|| ArrayD::zeros(tape.value(id).raw_dim()))
        })
        .collect()
}

fn labeled_record_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    obj: &ObjectiveConfig,
    item: &LabeledItem,
    mut rng: Option<ChaCha12Rng>,
) -> (f64, BoundValue, Vec<ArrayD<f64>>) {
    let mut tape = Tape::new();
    let graph = ModelGraph::new(&mut tape, cfg, params);
    let x_id = tape.constant(item.x.data().clone().into_dyn());
    let mut drop = match rng.as_mut() {
        Some(r) => Dropout::on(r, cfg.dropout_rate),
        None => Dropout::Off,
    };
    let emb = graph.embed_hard(&mut tape, item.y.index());
    let f1 = graph.b1(&mut tape, x_id, &mut drop);
    let (mu, lv) = graph.encode_from_f1(&mut tape, f1, emb, &mut drop);
    let kl = tape.gauss_kl(mu, lv);
    let z = tape.rsample(mu, lv, item.noise_z.clone());
    let dec = graph.decode(&mut tape, z, emb, &mut drop);
    let recon = recon_node(&mut tape, obj, dec, item.x);
    let cls = graph.classify_from_f1(&mut tape, f1, &mut drop);
    let clp = tape.cat_log_prob(cls, item.y.index());
    let scaled_kl = tape.scale(kl, -obj.beta);
    let partial = tape.add(recon, scaled_kl);
    let total = tape.add_const(partial, obj.log_prior());
    let scaled_clp = tape.scale(clp, obj.alpha);
    let contrib = tape.add(total, scaled_clp);
    let grads = tape.backward(contrib);
    let bound = BoundValue {
        total: tape.scalar(total),
        reconstruction_term: tape.scalar(recon),
        kl_term: tape.scalar(kl),
        entropy_term: 0.0,
        class_log_prob: tape.scalar(clp),
    };
    let gvec = collect_grads(&tape, &graph, grads);
    (tape.scalar(contrib), bound, gvec)
}

fn unlabeled_record_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    obj: &ObjectiveConfig,
    item: &UnlabeledItem,
    mut rng: Option<ChaCha12Rng>,
) -> (f64, BoundValue, Vec<ArrayD<f64>>) {
    let mut tape = Tape::new();
    let graph = ModelGraph::new(&mut tape, cfg, params);
    let x_id = tape.constant(item.x.data().clone().into_dyn());
    let mut drop = match rng.as_mut() {
        Some(r) => Dropout::on(r, cfg.dropout_rate),
        None => Dropout::Off,
    };
    let f1 = graph.b1(&mut tape, x_id, &mut drop);
    let cls = graph.classify_from_f1(&mut tape, f1, &mut drop);
    let gumbels = gumbels_from_uniform(&item.y_uniforms);
    let yhat = tape.gumbel_softmax(cls, obj.tau, gumbels);
    let emb = graph.embed_soft(&mut tape, yhat);
    let (mu, lv) = graph.encode_from_f1(&mut tape, f1, emb, &mut drop);
    let kl = tape.gauss_kl(mu, lv);
    let z = tape.rsample(mu, lv, item.noise_z.clone());
    let dec = graph.decode(&mut tape, z, emb, &mut drop);
    let recon = recon_node(&mut tape, obj, dec, item.x);
    let entropy = tape.entropy_logits(cls);
    let scaled_kl = tape.scale(kl, -obj.beta);
    let partial = tape.add(recon, scaled_kl);
    let no_entropy = tape.add_const(partial, obj.log_prior());
    let scaled_entropy = tape.scale(entropy, obj.gamma);
    let total = tape.add(no_entropy, scaled_entropy);
    let grads = tape.backward(total);
    let bound = BoundValue {
        total: tape.scalar(total),
        reconstruction_term: tape.scalar(recon),
        kl_term: tape.scalar(kl),
        entropy_term: tape.scalar(entropy),
        class_log_prob: 0.0,
    };
    let gvec = collect_grads(&tape, &graph, grads);
    (tape.scalar(total), bound, gvec)
}
