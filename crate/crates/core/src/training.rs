//! Stochastic maximization of the combined objective.
//!
//! The trainer runs the published schedules — linear β warm-up, exponential
//! Gumbel-temperature annealing — over Adam updates on J^α, with per-step
//! metrics logging and periodic checkpoints. Every random draw (batch
//! composition, Gaussian reparameterization noise, Gumbel class noise,
//! dropout masks) comes from an independent counter-based substream of the
//! run seed, so a run is a pure function of (config, data): resuming from a
//! checkpoint continues the exact trajectory, and generator state never
//! needs serializing beyond the step counter.
//!
//! Batches mix labeled and unlabeled records proportionally to their
//! dataset counts, with at least [`MIN_LABELED_PER_BATCH`] labeled slots so
//! the α-term contributes signal every step; records are drawn with
//! replacement, which keeps the policy well-defined for desk-scale datasets
//! far smaller than the step count.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::distributions::{standard_normal_vec, uniform_vec};
use crate::error::{Error, Result};
use crate::networks::{ModelConfig, ModelParams};
use crate::objectives::{
    alpha_from_dims, combined_objective_with_grads, DropoutRngs, LabeledItem, Likelihood,
    ObjectiveConfig, UnlabeledItem,
};
use crate::rng::{block_rng, STREAM_DATA, STREAM_DROPOUT, STREAM_GAUSSIAN, STREAM_GUMBEL};
use crate::volumes::{
    load_label_volume, preprocess, DatasetManifest, OneHotVolume, PreprocessConfig,
};
use crate::SurvivalClass;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

/// Labeled slots guaranteed in every batch (capped at the batch size).
pub const MIN_LABELED_PER_BATCH: usize = 4;

/// Hyperparameters of one training run. Defaults are the published values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: u64,
    pub beta_end: f64,
    pub beta_steps: u64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_steps: u64,
    pub gamma: f64,
    /// Classification-loss weight; `None` derives α = 10⁻⁵·D from the model
    /// input shape.
    pub alpha: Option<f64>,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub likelihood: Likelihood,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 2e-5,
            total_steps: 60_000,
            beta_end: 6e3,
            beta_steps: 30_000,
            tau_start: 1.0,
            tau_end: 0.2,
            tau_steps: 50_000,
            gamma: 50.0,
            alpha: None,
            seed: 0,
            checkpoint_interval: 10_000,
            likelihood: Likelihood::Bernoulli,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > 4096 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must lie in 1..=4096, got {}",
                self.batch_size
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !self.beta_end.is_finite() || self.beta_end < 0.0 {
            return Err(Error::InvalidConfig(format!("beta_end must be ≥ 0, got {}", self.beta_end)));
        }
        if self.beta_steps == 0 || self.tau_steps == 0 {
            return Err(Error::InvalidConfig("schedule lengths must be positive".into()));
        }
        if !self.tau_start.is_finite() || self.tau_start <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "tau_start must be > 0, got {}",
                self.tau_start
            )));
        }
        if !self.tau_end.is_finite() || self.tau_end <= 0.0 || self.tau_end > self.tau_start {
            return Err(Error::InvalidConfig(format!(
                "tau_end must lie in (0, tau_start], got {}",
                self.tau_end
            )));
        }
        if !self.gamma.is_finite() || self.gamma < 1.0 {
            return Err(Error::InvalidConfig(format!("gamma must be ≥ 1, got {}", self.gamma)));
        }
        if let Some(a) = self.alpha {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::InvalidConfig(format!("alpha must be ≥ 0, got {a}")));
            }
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::InvalidConfig("checkpoint_interval must be positive".into()));
        }
        Ok(())
    }

    /// The α actually used: the explicit override, or 10⁻⁵·D.
    pub fn effective_alpha(&self, model: &ModelConfig) -> f64 {
        self.alpha.unwrap_or_else(|| alpha_from_dims(model.input_shape))
    }

    /// Schedule compressed to minutes-per-run on one core, for synthetic
    /// desk-scale datasets. The derived α is far too small at desk input
    /// dimension to move the classifier, so it is pinned explicitly.
    pub fn desk_scale() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            total_steps: 600,
            beta_end: 10.0,
            beta_steps: 300,
            tau_start: 1.0,
            tau_end: 0.2,
            tau_steps: 500,
            gamma: 1.0,
            alpha: Some(10.0),
            seed: 0,
            checkpoint_interval: 200,
            likelihood: Likelihood::Bernoulli,
        }
    }
}

/// Linear β warm-up: min(step/beta_steps, 1)·beta_end.
pub fn beta_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    (step as f64 / cfg.beta_steps as f64).min(1.0) * cfg.beta_end
}

/// Exponential τ annealing: tau_start·(tau_end/tau_start)^min(step/tau_steps, 1).
pub fn tau_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let frac = (step as f64 / cfg.tau_steps as f64).min(1.0);
    cfg.tau_start * (cfg.tau_end / cfg.tau_start).powf(frac)
}

/// Labeled/unlabeled slot counts for one batch: proportional to the dataset
/// ratio, at least [`MIN_LABELED_PER_BATCH`] labeled.
pub fn batch_counts(batch_size: usize, n_labeled: usize, n_unlabeled: usize) -> (usize, usize) {
    if n_unlabeled == 0 {
        return (batch_size, 0);
    }
    let ideal = (batch_size as f64 * n_labeled as f64 / (n_labeled + n_unlabeled) as f64).round()
        as usize;
    let floor = MIN_LABELED_PER_BATCH.min(batch_size);
    let labeled = ideal.clamp(floor, batch_size);
    (labeled, batch_size - labeled)
}

/// Adam first and second moments, aligned with the parameter tree.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn zeros(model: &ModelConfig) -> Result<Self> {
        Ok(AdamState { m: ModelParams::zeros(model)?, v: ModelParams::zeros(model)? })
    }

    /// Both moment trees, for serialization in canonical order.
    pub fn visit_mut(
        &mut self,
    ) -> (Vec<(String, &mut ndarray::ArrayD<f64>)>, Vec<(String, &mut ndarray::ArrayD<f64>)>) {
        (self.m.visit_mut(), self.v.visit_mut())
    }
}

/// Complete training state. Generators are counter-based functions of
/// (seed, step), so `step` alone captures the RNG position.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub params: ModelParams,
    pub opt: AdamState,
}

impl TrainState {
    /// Zeroed state with shapes from `model`; the skeleton checkpoints load
    /// into.
    pub fn fresh(model: &ModelConfig) -> Result<Self> {
        Ok(TrainState { step: 0, params: ModelParams::zeros(model)?, opt: AdamState::zeros(model)? })
    }
}

/// One preloaded labeled record.
#[derive(Debug, Clone)]
pub struct LabeledRecord {
    pub subject_id: String,
    pub volume: OneHotVolume,
    pub label: SurvivalClass,
}

/// One preloaded unlabeled record.
#[derive(Debug, Clone)]
pub struct UnlabeledRecord {
    pub subject_id: String,
    pub volume: OneHotVolume,
}

/// In-memory dataset: every volume preprocessed to the model input shape.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub labeled: Vec<LabeledRecord>,
    pub unlabeled: Vec<UnlabeledRecord>,
}

impl TrainData {
    /// Load and preprocess every manifest record.
    pub fn from_manifest(manifest: &DatasetManifest, pre: &PreprocessConfig) -> Result<Self> {
        pre.validate()?;
        let mut data = TrainData::default();
        for rec in manifest.records() {
            let seg = load_label_volume(&manifest.resolved_path(rec), None)?;
            let volume = preprocess(&seg, pre)?;
            match rec.class_label {
                Some(label) => data.labeled.push(LabeledRecord {
                    subject_id: rec.subject_id.clone(),
                    volume,
                    label,
                }),
                None => data
                    .unlabeled
                    .push(UnlabeledRecord { subject_id: rec.subject_id.clone(), volume }),
            }
        }
        Ok(data)
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }
}

fn validate_data(model: &ModelConfig, data: &TrainData) -> Result<()> {
    if data.labeled.is_empty() {
        return Err(Error::InvalidConfig("training requires at least one labeled record".into()));
    }
    let volumes = data
        .labeled
        .iter()
        .map(|r| &r.volume)
        .chain(data.unlabeled.iter().map(|r| &r.volume));
    for v in volumes {
        if v.spatial_shape() != model.input_shape {
            let mut expected = vec![model.channel_count];
            expected.extend_from_slice(&model.input_shape);
            return Err(Error::ShapeMismatch { expected, got: v.data().shape().to_vec() });
        }
    }
    Ok(())
}

/// Train from a fresh seeded initialization, writing checkpoints and
/// `metrics.csv` under `out_dir`.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    out_dir: &Path,
) -> Result<TrainState> {
    model.validate()?;
    cfg.validate()?;
    validate_data(model, data)?;
    let mut state = TrainState::fresh(model)?;
    state.params = ModelParams::init(model, cfg.seed)?;
    run_loop(model, cfg, data, state, out_dir)
}

/// Continue a checkpointed run to `cfg.total_steps`. Every field of the
/// stored configs except `total_steps` and `checkpoint_interval` must match,
/// or the error names the offending field.
pub fn resume(
    checkpoint: &Path,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    out_dir: &Path,
) -> Result<TrainState> {
    let saved = load_checkpoint(checkpoint)?;
    cfg.validate()?;
    let mismatch = config_mismatch("model", &saved.model, model, &[])
        .or_else(|| config_mismatch("train", &saved.train, cfg, &["total_steps", "checkpoint_interval"]));
    if let Some(field) = mismatch {
        return Err(Error::Checkpoint {
            path: checkpoint.to_path_buf(),
            reason: format!("config mismatch in {field}"),
        });
    }
    validate_data(model, data)?;
    run_loop(model, cfg, data, saved.state, out_dir)
}

fn config_mismatch<T: Serialize>(kind: &str, stored: &T, given: &T, exempt: &[&str]) -> Option<String> {
    let a = serde_json::to_value(stored).ok()?;
    let b = serde_json::to_value(given).ok()?;
    for (key, value) in a.as_object()? {
        if exempt.contains(&key.as_str()) {
            continue;
        }
        if b.get(key) != Some(value) {
            return Some(format!("{kind}.{key}"));
        }
    }
    None
}

fn run_loop(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    mut state: TrainState,
    out_dir: &Path,
) -> Result<TrainState> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let write_header = !metrics_path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if write_header {
        metrics.write_record([
            "step",
            "total",
            "reconstruction",
            "kl",
            "entropy",
            "class_log_prob",
            "beta",
            "tau",
        ])?;
    }

    let alpha = cfg.effective_alpha(model);
    let (n_l, n_u) = (data.labeled.len(), data.unlabeled.len());
    let (bl, bu) = batch_counts(cfg.batch_size, n_l, n_u);

    while state.step < cfg.total_steps {
        let step = state.step;
        let beta = beta_schedule(step, cfg);
        let tau = tau_schedule(step, cfg);
        let obj = ObjectiveConfig {
            alpha,
            beta,
            gamma: cfg.gamma,
            tau,
            class_count: model.class_count,
            likelihood: cfg.likelihood,
        };

        let mut data_rng = block_rng(cfg.seed, STREAM_DATA, step, 0);
        let labeled_items: Vec<LabeledItem> = (0..bl)
            .map(|slot| {
                let rec = &data.labeled[rand::Rng::random_range(&mut data_rng, 0..n_l)];
                let noise_z = standard_normal_vec(
                    &mut block_rng(cfg.seed, STREAM_GAUSSIAN, step, slot as u64),
                    model.latent_size,
                );
                LabeledItem { x: &rec.volume, y: rec.label, noise_z }
            })
            .collect();
        let unlabeled_items: Vec<UnlabeledItem> = (0..bu)
            .map(|i| {
                let slot = (bl + i) as u64;
                let rec = &data.unlabeled[rand::Rng::random_range(&mut data_rng, 0..n_u)];
                UnlabeledItem {
                    x: &rec.volume,
                    y_uniforms: uniform_vec(
                        &mut block_rng(cfg.seed, STREAM_GUMBEL, step, slot),
                        model.class_count,
                    ),
                    noise_z: standard_normal_vec(
                        &mut block_rng(cfg.seed, STREAM_GAUSSIAN, step, slot),
                        model.latent_size,
                    ),
                }
            })
            .collect();
        let dropout = DropoutRngs {
            labeled: (0..bl).map(|s| block_rng(cfg.seed, STREAM_DROPOUT, step, s as u64)).collect(),
            unlabeled: (0..bu)
                .map(|i| block_rng(cfg.seed, STREAM_DROPOUT, step, (bl + i) as u64))
                .collect(),
        };

        let bg = combined_objective_with_grads(
            model,
            &state.params,
            &obj,
            &labeled_items,
            &unlabeled_items,
            Some(dropout),
        )?;
        if !bg.objective.is_finite() {
            return abort_non_finite(model, cfg, &state, out_dir, &mut metrics, "training objective");
        }

        adam_update(&mut state, &bg.grads, cfg);
        state.step += 1;
        if !state.params.all_finite() {
            return abort_non_finite(model, cfg, &state, out_dir, &mut metrics, "model parameters");
        }

        metrics.serialize((
            step,
            bg.objective,
            bg.sums.reconstruction,
            bg.sums.kl,
            bg.sums.entropy,
            bg.sums.class_log_prob,
            beta,
            tau,
        ))?;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;

        if state.step % cfg.checkpoint_interval == 0 && state.step < cfg.total_steps {
            let path = out_dir.join(format!("checkpoint_{:06}.ckpt", state.step));
            save_checkpoint(&path, model, cfg, &state)?;
        }
    }

    save_checkpoint(&out_dir.join("final.ckpt"), model, cfg, &state)?;
    Ok(state)
}

fn abort_non_finite<W: std::io::Write>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    state: &TrainState,
    out_dir: &Path,
    metrics: &mut csv::Writer<W>,
    what: &'static str,
) -> Result<TrainState> {
    let _ = metrics.flush();
    save_checkpoint(&out_dir.join("diagnostic.ckpt"), model, cfg, state)?;
    Err(Error::NonFinite { what })
}

fn adam_update(state: &mut TrainState, grads: &ModelParams, cfg: &TrainConfig) {
    let t = (state.step + 1).min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = cfg.learning_rate;
    let params = state.params.visit_mut();
    let (m, v) = state.opt.visit_mut();
    for (((_, p), (_, m)), ((_, v), (_, g))) in params
        .into_iter()
        .zip(m)
        .zip(v.into_iter().zip(grads.visit()))
    {
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p += lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPSILON);
        });
    }
}

/// Paths of the artifacts a run leaves under its output directory.
pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.csv")
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("final.ckpt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{load_checkpoint, params_checksum, save_checkpoint};
    use crate::networks::{decode_probs, encode_eval};
    use crate::rng::stream_rng;
    use ndarray::Array4;
    use rand::Rng;
    use tempfile::TempDir;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_shape: [4, 4, 4],
            latent_size: 2,
            class_count: 3,
            channel_count: 4,
            embedding_size: 2,
            encoder_widths: [2, 2, 2],
            decoder_fc_channels: 2,
            decoder_widths: [2, 2, 2, 2],
            classifier_widths: [2, 2],
            classifier_hidden: 4,
            dropout_rate: 0.2,
        }
    }

    fn random_volume(shape: [usize; 3], rng: &mut impl Rng) -> OneHotVolume {
        let mut data = Array4::<f64>::zeros((4, shape[0], shape[1], shape[2]));
        for i1 in 0..shape[0] {
            for i2 in 0..shape[1] {
                for i3 in 0..shape[2] {
                    let ch = rng.random_range(0..4usize);
                    data[[ch, i1, i2, i3]] = 1.0;
                }
            }
        }
        OneHotVolume::new(data).unwrap()
    }

    fn tiny_data(n_labeled: usize, n_unlabeled: usize, seed: u64) -> TrainData {
        let mut rng = stream_rng(seed, STREAM_DATA);
        let mut data = TrainData::default();
        for i in 0..n_labeled {
            data.labeled.push(LabeledRecord {
                subject_id: format!("l{i}"),
                volume: random_volume([4, 4, 4], &mut rng),
                label: SurvivalClass::from_index(i % 3).unwrap(),
            });
        }
        for i in 0..n_unlabeled {
            data.unlabeled.push(UnlabeledRecord {
                subject_id: format!("u{i}"),
                volume: random_volume([4, 4, 4], &mut rng),
            });
        }
        data
    }

    fn tiny_train_cfg(total_steps: u64, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 6,
            learning_rate: 1e-3,
            total_steps,
            beta_end: 10.0,
            beta_steps: 20,
            tau_start: 1.0,
            tau_end: 0.2,
            tau_steps: 40,
            gamma: 2.0,
            alpha: Some(0.37),
            seed,
            checkpoint_interval: 10,
            likelihood: Likelihood::Bernoulli,
        }
    }

    #[test]
    fn beta_schedule_matches_published_ramp() {
        let cfg = TrainConfig::default();
        assert_eq!(beta_schedule(0, &cfg), 0.0);
        assert_eq!(beta_schedule(15_000, &cfg), 3000.0);
        assert_eq!(beta_schedule(30_000, &cfg), 6000.0);
        assert_eq!(beta_schedule(100_000, &cfg), 6000.0);
        let mut prev = -1.0;
        for step in (0..70_000).step_by(500) {
            let b = beta_schedule(step, &cfg);
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn tau_schedule_matches_published_annealing() {
        let cfg = TrainConfig::default();
        assert_eq!(tau_schedule(0, &cfg), 1.0);
        assert!((tau_schedule(50_000, &cfg) - 0.2).abs() < 1e-15);
        assert!((tau_schedule(200_000, &cfg) - 0.2).abs() < 1e-15);
        let mid = tau_schedule(25_000, &cfg);
        assert!((mid - 0.2f64.sqrt()).abs() < 1e-12);
        assert!((mid - 0.4472).abs() < 1e-4);
        let mut prev = 2.0;
        for step in (0..70_000).step_by(500) {
            let t = tau_schedule(step, &cfg);
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn batch_counts_follow_ratio_with_labeled_floor() {
        assert_eq!(batch_counts(32, 10, 30), (8, 24));
        assert_eq!(batch_counts(32, 1, 99), (4, 28));
        assert_eq!(batch_counts(32, 50, 0), (32, 0));
        assert_eq!(batch_counts(32, 99, 1), (32, 0));
        assert_eq!(batch_counts(2, 1, 99), (2, 0));
        assert_eq!(batch_counts(6, 4, 3), (4, 2));
    }

    #[test]
    fn train_config_defaults_match_published_values() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.learning_rate, 2e-5);
        assert_eq!(cfg.beta_end, 6000.0);
        assert_eq!(cfg.beta_steps, 30_000);
        assert_eq!(cfg.tau_start, 1.0);
        assert_eq!(cfg.tau_end, 0.2);
        assert_eq!(cfg.tau_steps, 50_000);
        assert_eq!(cfg.gamma, 50.0);
        assert!(cfg.validate().is_ok());

        let parsed: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"learning_rate": 1e-3}"#).unwrap();
        assert_eq!(partial.learning_rate, 1e-3);
        assert_eq!(partial.batch_size, 32);
        let round: TrainConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn train_config_rejects_bad_values() {
        let ok = TrainConfig::default();
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { beta_steps: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { tau_end: 1.5, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { tau_end: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { gamma: 0.9, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { alpha: Some(-1.0), ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { checkpoint_interval: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn effective_alpha_derives_from_voxel_count() {
        let cfg = TrainConfig::default();
        assert!((cfg.effective_alpha(&ModelConfig::full_scale()) - 4.39168).abs() < 1e-12);
        let fixed = TrainConfig { alpha: Some(2.5), ..cfg };
        assert_eq!(fixed.effective_alpha(&ModelConfig::full_scale()), 2.5);
    }

    #[test]
    fn training_requires_labeled_data() {
        let model = tiny_model();
        let dir = TempDir::new().unwrap();
        let data = TrainData {
            labeled: vec![],
            unlabeled: tiny_data(0, 3, 1).unlabeled,
        };
        let err = train(&model, &tiny_train_cfg(5, 0), &data, dir.path()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        assert!(!metrics_path(dir.path()).exists());
    }

    #[test]
    fn same_seed_reproduces_same_checksum() {
        let model = tiny_model();
        let data = tiny_data(4, 3, 2);
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        let d3 = TempDir::new().unwrap();
        let s1 = train(&model, &tiny_train_cfg(25, 9), &data, d1.path()).unwrap();
        let s2 = train(&model, &tiny_train_cfg(25, 9), &data, d2.path()).unwrap();
        let s3 = train(&model, &tiny_train_cfg(25, 10), &data, d3.path()).unwrap();
        assert_eq!(params_checksum(&s1.params), params_checksum(&s2.params));
        assert_ne!(params_checksum(&s1.params), params_checksum(&s3.params));
        assert!(d1.path().join("checkpoint_000010.ckpt").exists());
        assert!(d1.path().join("checkpoint_000020.ckpt").exists());
        assert!(final_checkpoint_path(d1.path()).exists());
    }

    #[test]
    fn resume_continues_exact_trajectory() {
        let model = tiny_model();
        let data = tiny_data(4, 3, 3);
        let straight_dir = TempDir::new().unwrap();
        let split_dir = TempDir::new().unwrap();

        let straight = train(&model, &tiny_train_cfg(200, 4), &data, straight_dir.path()).unwrap();

        let first = train(&model, &tiny_train_cfg(100, 4), &data, split_dir.path()).unwrap();
        assert_eq!(first.step, 100);
        let resumed = resume(
            &final_checkpoint_path(split_dir.path()),
            &model,
            &tiny_train_cfg(200, 4),
            &data,
            split_dir.path(),
        )
        .unwrap();
        assert_eq!(resumed.step, 200);
        assert_eq!(params_checksum(&straight.params), params_checksum(&resumed.params));

        let a = std::fs::read_to_string(metrics_path(straight_dir.path())).unwrap();
        let b = std::fs::read_to_string(metrics_path(split_dir.path())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_rejects_mismatched_configs() {
        let model = tiny_model();
        let data = tiny_data(4, 0, 5);
        let dir = TempDir::new().unwrap();
        train(&model, &tiny_train_cfg(5, 6), &data, dir.path()).unwrap();
        let ckpt = final_checkpoint_path(dir.path());

        let bad_train = TrainConfig { learning_rate: 5e-4, ..tiny_train_cfg(10, 6) };
        let err = resume(&ckpt, &model, &bad_train, &data, dir.path()).unwrap_err();
        assert!(err.to_string().contains("train.learning_rate"), "{err}");

        let bad_model = ModelConfig { latent_size: 3, ..tiny_model() };
        let err = resume(&ckpt, &bad_model, &tiny_train_cfg(10, 6), &data, dir.path()).unwrap_err();
        assert!(err.to_string().contains("model.latent_size"), "{err}");

        let more_steps = tiny_train_cfg(8, 6);
        assert!(resume(&ckpt, &model, &more_steps, &data, dir.path()).is_ok());
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption_detection() {
        let model = tiny_model();
        let cfg = tiny_train_cfg(3, 7);
        let data = tiny_data(4, 2, 7);
        let dir = TempDir::new().unwrap();
        let state = train(&model, &cfg, &data, dir.path()).unwrap();
        let path = dir.path().join("round.ckpt");
        save_checkpoint(&path, &model, &cfg, &state).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model, model);
        assert_eq!(loaded.train, cfg);
        assert_eq!(loaded.state.step, 3);
        assert_eq!(params_checksum(&loaded.state.params), params_checksum(&state.params));
        for ((_, a), (_, b)) in loaded.state.opt.m.visit().into_iter().zip(state.opt.m.visit()) {
            assert_eq!(a, b);
        }

        let original = std::fs::read(&path).unwrap();

        let mut corrupt = original.clone();
        let mid = corrupt.len() / 2;
        corrupt[mid] ^= 0xff;
        std::fs::write(&path, &corrupt).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");

        std::fs::write(&path, &original[..original.len() / 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut bad_magic = original.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bad_version = original.clone();
        bad_version[8] = 99;
        std::fs::write(&path, &bad_version).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn params_checksum_tracks_content() {
        let model = tiny_model();
        let a = ModelParams::init(&model, 1).unwrap();
        let mut b = a.clone();
        assert_eq!(params_checksum(&a), params_checksum(&b));
        *b.visit_mut()[0].1.iter_mut().next().unwrap() += 1e-9;
        assert_ne!(params_checksum(&a), params_checksum(&b));
    }

    #[test]
    fn metrics_log_recombines_to_total() {
        let model = tiny_model();
        let cfg = tiny_train_cfg(10, 8);
        let data = tiny_data(4, 3, 8);
        let dir = TempDir::new().unwrap();
        train(&model, &cfg, &data, dir.path()).unwrap();

        let text = std::fs::read_to_string(metrics_path(dir.path())).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,total,reconstruction,kl,entropy,class_log_prob,beta,tau"
        );
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 10);
        let (bl, bu) = batch_counts(cfg.batch_size, 4, 3);
        let alpha = cfg.effective_alpha(&model);
        let lp = -(3.0f64.ln());
        for (i, row) in rows.iter().enumerate() {
            let [step, total, recon, kl, entropy, clp, beta, tau] = row[..] else {
                panic!("bad row")
            };
            assert_eq!(step as usize, i);
            assert_eq!(beta, beta_schedule(i as u64, &cfg));
            assert_eq!(tau, tau_schedule(i as u64, &cfg));
            let recombined =
                recon + (bl + bu) as f64 * lp - beta * kl + cfg.gamma * entropy + alpha * clp;
            assert!(
                (total - recombined).abs() <= 1e-6 * total.abs().max(1.0),
                "step {i}: total {total} vs recombined {recombined}"
            );
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic_checkpoint() {
        let model = tiny_model();
        let cfg = TrainConfig { learning_rate: 1e308, ..tiny_train_cfg(20, 11) };
        let data = tiny_data(4, 2, 11);
        let dir = TempDir::new().unwrap();
        let err = train(&model, &cfg, &data, dir.path()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        let diag = dir.path().join("diagnostic.ckpt");
        assert!(diag.exists());
        assert!(load_checkpoint(&diag).is_ok());
    }

    #[test]
    fn train_data_loads_from_manifest() {
        use crate::volumes::{write_raw, ManifestRecord, RemapTable};
        use ndarray::Array3;

        let dir = TempDir::new().unwrap();
        let mut values = Array3::<u8>::zeros((4, 4, 4));
        values[[1, 1, 1]] = 1;
        values[[2, 2, 2]] = 3;
        write_raw(&dir.path().join("a.vol"), &values, Some(&RemapTable::identity())).unwrap();
        write_raw(&dir.path().join("b.vol"), &values, Some(&RemapTable::identity())).unwrap();

        let manifest = DatasetManifest::new(vec![
            ManifestRecord::labeled("subj-a", "a.vol", 100.0),
            ManifestRecord::unlabeled("subj-b", "b.vol"),
        ])
        .unwrap()
        .with_base_dir(dir.path());

        let pre = PreprocessConfig {
            crop_origin: None,
            crop_extent: [4, 4, 4],
            downsample_factor: 1,
        };
        let data = TrainData::from_manifest(&manifest, &pre).unwrap();
        assert_eq!(data.n_labeled(), 1);
        assert_eq!(data.n_unlabeled(), 1);
        assert_eq!(data.labeled[0].subject_id, "subj-a");
        assert_eq!(data.labeled[0].label, SurvivalClass::Short);
        assert_eq!(data.labeled[0].volume.spatial_shape(), [4, 4, 4]);
        assert_eq!(data.labeled[0].volume.data()[[1, 1, 1, 1]], 1.0);
        assert_eq!(data.labeled[0].volume.data()[[0, 0, 0, 0]], 1.0);
    }

    fn blob_volume(shape: [usize; 3], radius: f64, center: [f64; 3]) -> OneHotVolume {
        let mut data = Array4::<f64>::zeros((4, shape[0], shape[1], shape[2]));
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    let d = ((i as f64 - center[0]).powi(2)
                        + (j as f64 - center[1]).powi(2)
                        + (k as f64 - center[2]).powi(2))
                    .sqrt();
                    let ch = if d < 0.6 * radius {
                        3
                    } else if d < radius {
                        1
                    } else {
                        0
                    };
                    data[[ch, i, j, k]] = 1.0;
                }
            }
        }
        OneHotVolume::new(data).unwrap()
    }

    fn mean_true_channel_prob(model: &ModelConfig, params: &ModelParams, data: &TrainData) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for rec in &data.labeled {
            let emb = params.embedding_row(rec.label.index());
            let x = rec.volume.data().clone().into_dyn();
            let (mu, _) = encode_eval(model, params, &x, &emb);
            let probs = decode_probs(model, params, &mu, &emb);
            for ((ch, i, j, k), &t) in rec.volume.data().indexed_iter() {
                if t == 1.0 {
                    total += probs[[ch, i, j, k]];
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn overfit_smoke_test_reconstructs_synthetic_blobs() {
        let model = ModelConfig::miniature();
        let mut rng = stream_rng(99, STREAM_DATA);
        let mut data = TrainData::default();
        for i in 0..8 {
            let label = SurvivalClass::from_index(i % 3).unwrap();
            let radius = 1.3 + 0.9 * label.index() as f64 + rng.random_range(-0.2..0.2);
            let center = [
                3.5 + rng.random_range(-0.8..0.8),
                3.5 + rng.random_range(-0.8..0.8),
                3.5 + rng.random_range(-0.8..0.8),
            ];
            data.labeled.push(LabeledRecord {
                subject_id: format!("synth{i}"),
                volume: blob_volume(model.input_shape, radius, center),
                label,
            });
        }
        let cfg = TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            total_steps: 2000,
            beta_end: 0.0,
            beta_steps: 30_000,
            tau_start: 1.0,
            tau_end: 0.2,
            tau_steps: 50_000,
            gamma: 1.0,
            // The derived α (10⁻⁵·512) is negligible at miniature dimension;
            // pin it high enough that the classifier trains too.
            alpha: Some(5.0),
            seed: 12,
            checkpoint_interval: 1000,
            likelihood: Likelihood::Bernoulli,
        };
        let dir = TempDir::new().unwrap();
        let state = train(&model, &cfg, &data, dir.path()).unwrap();

        let text = std::fs::read_to_string(metrics_path(dir.path())).unwrap();
        let recon: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert_eq!(recon.len(), 2000);
        let windows: Vec<f64> = recon
            .chunks(100)
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect();
        for pair in windows.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-9 * pair[0].abs(),
                "smoothed reconstruction regressed: {} -> {}",
                pair[0],
                pair[1]
            );
        }

        let prob = mean_true_channel_prob(&model, &state.params, &data);
        assert!(prob > 0.9, "final true-channel probability {prob}");

        let correct = data
            .labeled
            .iter()
            .filter(|r| {
                let pred =
                    crate::evaluation::predict_class(&model, &state.params, &r.volume).unwrap();
                pred.class == r.label
            })
            .count();
        assert_eq!(correct, data.labeled.len(), "training-set classification");
    }
}
