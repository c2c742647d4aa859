//! S0/S1 experimental regime assembly over arbitrary manifests: fold
//! construction, unlabeled-pool attachment, and the full 3-fold
//! train/evaluate pipeline.
//!
//! S0 is the base setting — the first unlabeled source, unaugmented. S1
//! expands the pool: every source, plus left/right-flipped copies when the
//! flip flag is set, so S1's pool always contains S0's. Multi-segmenter
//! pools are emulated by noise-perturbed re-renderings of the same subject
//! (`synthdata`), whose ids carry derivation suffixes (`_p<k>`, then
//! `_flip`). The leak check strips those suffixes before comparing against
//! validation ids: no fold trains on any derivative of one of its own
//! validation subjects. Whether the original protocol excluded validation
//! subjects' automatic segmentations from the expanded pool is unrecorded;
//! exclusion is enforced here.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{
    evaluation_report, fold_report, majority_vote, make_cv_splits, predict_class, ClassStats,
    EvalReport, FoldEvaluation, PredictionRow, DEFAULT_Z_STAR,
};
use crate::networks::ModelConfig;
use crate::training::{final_checkpoint_path, train, TrainConfig, TrainData};
use crate::volumes::{
    flip_lr, load_label_volume, preprocess, write_raw, DatasetManifest, ManifestRecord,
    PreprocessConfig, RemapTable,
};

/// Experimental regime: base unlabeled pool (S0) or expanded pool (S1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    S0,
    S1,
}

/// Everything needed to assemble one regime's folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub regime: Regime,
    /// Labeled manifest (CSV path).
    pub labeled: PathBuf,
    /// Unlabeled source manifests; S0 uses the first, S1 all of them. Empty
    /// gives the labeled-only ablation.
    #[serde(default)]
    pub unlabeled: Vec<PathBuf>,
    /// Double the S1 pool with left/right-flipped copies.
    #[serde(default)]
    pub flip: bool,
    /// Fold-assembly seed; training randomness comes from the train config.
    #[serde(default)]
    pub seed: u64,
}

impl RegimeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.flip && self.regime == Regime::S0 {
            return Err(Error::InvalidConfig(
                "flip augmentation is part of the expanded regime; use S1".into(),
            ));
        }
        Ok(())
    }
}

/// One fold's assembled manifests: training (labeled + leak-checked
/// unlabeled pool) and labeled-only validation.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub fold_id: usize,
    pub train: DatasetManifest,
    pub validation: DatasetManifest,
}

/// Strip derivation suffixes (`_flip`, then `_p<k>`) down to the source
/// subject id.
fn base_subject_id(id: &str) -> &str {
    let id = id.strip_suffix("_flip").unwrap_or(id);
    match id.rfind("_p") {
        Some(pos)
            if pos + 2 < id.len() && id[pos + 2..].chars().all(|c| c.is_ascii_digit()) =>
        {
            &id[..pos]
        }
        _ => id,
    }
}

/// A record re-pointed at its resolved (absolute when possible) path, so it
/// stays loadable from a manifest with a different base directory.
fn resolved_record(manifest: &DatasetManifest, record: &ManifestRecord) -> ManifestRecord {
    let mut out = record.clone();
    out.volume_path = manifest.resolved_path(record);
    out
}

/// Assemble per-fold train/validation manifests from loaded manifests.
///
/// `aug_dir` receives flipped volume files when the spec asks for flip
/// augmentation; it is untouched otherwise.
pub fn assemble_folds(
    spec: &RegimeSpec,
    labeled: &DatasetManifest,
    sources: &[DatasetManifest],
    aug_dir: &Path,
) -> Result<Vec<FoldPlan>> {
    spec.validate()?;
    if labeled.n_labeled() == 0 {
        return Err(Error::InvalidConfig("regime requires a labeled manifest".into()));
    }
    let splits = make_cv_splits(labeled, spec.seed)?;

    let pool_sources: &[DatasetManifest] = match spec.regime {
        Regime::S0 => &sources[..sources.len().min(1)],
        Regime::S1 => sources,
    };
    let mut pool: Vec<ManifestRecord> = Vec::new();
    for source in pool_sources {
        for rec in source.unlabeled_records() {
            pool.push(resolved_record(source, rec));
        }
    }
    if spec.flip {
        fs::create_dir_all(aug_dir).map_err(|e| Error::io(aug_dir, e))?;
        let mut flipped = Vec::with_capacity(pool.len());
        for rec in &pool {
            let volume = load_label_volume(&rec.volume_path, None)?;
            let id = format!("{}_flip", rec.subject_id);
            let path = aug_dir.join(format!("{id}.vol"));
            write_raw(&path, flip_lr(&volume).data(), Some(&RemapTable::identity()))?;
            flipped.push(ManifestRecord::unlabeled(id, path));
        }
        pool.extend(flipped);
    }

    let labeled_by_id = |ids: &[String]| -> Vec<ManifestRecord> {
        labeled
            .labeled_records()
            .filter(|r| ids.contains(&r.subject_id))
            .map(|r| resolved_record(labeled, r))
            .collect()
    };
    splits
        .iter()
        .map(|split| {
            let mut train = labeled_by_id(&split.train_ids);
            train.extend(
                pool.iter()
                    .filter(|r| {
                        let base = base_subject_id(&r.subject_id);
                        !split.validation_ids.iter().any(|v| v == base)
                    })
                    .cloned(),
            );
            Ok(FoldPlan {
                fold_id: split.fold_id,
                train: DatasetManifest::new(train)?,
                validation: DatasetManifest::new(labeled_by_id(&split.validation_ids))?,
            })
        })
        .collect()
}

/// Load the spec's manifests from disk and assemble folds.
pub fn build_regime(spec: &RegimeSpec, aug_dir: &Path) -> Result<Vec<FoldPlan>> {
    let labeled = DatasetManifest::read_csv(&spec.labeled)?;
    let sources = spec
        .unlabeled
        .iter()
        .map(|p| DatasetManifest::read_csv(p))
        .collect::<Result<Vec<_>>>()?;
    assemble_folds(spec, &labeled, &sources, aug_dir)
}

/// One trained fold's artifacts.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold_id: usize,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
}

/// A full regime run: per-fold artifacts, the pooled report, and (when a
/// held-out manifest was supplied) majority-vote predictions over the fold
/// models.
#[derive(Debug, Clone)]
pub struct RegimeOutcome {
    pub folds: Vec<FoldOutcome>,
    pub report: EvalReport,
    pub holdout_predictions: Option<Vec<PredictionRow>>,
}

fn stats_from_records<'a>(
    records: impl Iterator<Item = &'a ManifestRecord>,
) -> Result<ClassStats> {
    ClassStats::from_pairs(records.filter_map(|r| Some((r.class_label?, r.survival_days?))))
}

fn load_input(
    manifest: &DatasetManifest,
    record: &ManifestRecord,
    pre: &PreprocessConfig,
) -> Result<crate::volumes::OneHotVolume> {
    let seg = load_label_volume(&manifest.resolved_path(record), None)?;
    preprocess(&seg, pre)
}

/// Train one model per fold (fold k seeds with `train seed + k`), evaluate
/// each on its own validation subjects, and pool the fold rows. Held-out
/// subjects are scored by majority vote across the fold models, with
/// predicted days from the full labeled set's class means; when every
/// held-out record carries true days, the vote is also scored as the
/// report's majority row.
pub fn run_regime(
    plans: &[FoldPlan],
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    pre: &PreprocessConfig,
    holdout: Option<&DatasetManifest>,
    out_dir: &Path,
) -> Result<RegimeOutcome> {
    if plans.is_empty() {
        return Err(Error::InvalidConfig("regime run requires at least one fold".into()));
    }
    let mut outcomes = Vec::with_capacity(plans.len());
    let mut fold_params = Vec::with_capacity(plans.len());
    let mut fold_evals = Vec::with_capacity(plans.len());
    for plan in plans {
        let fold_dir = out_dir.join(format!("fold{}", plan.fold_id));
        fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
        let mut cfg = train_cfg.clone();
        cfg.seed = train_cfg.seed + plan.fold_id as u64;
        let data = TrainData::from_manifest(&plan.train, pre)?;
        let state = train(model, &cfg, &data, &fold_dir)?;

        // Day predictions use the fold's own training-label means, keeping
        // each fold's evaluation blind to its validation subjects.
        let stats = stats_from_records(plan.train.labeled_records())?;
        let mut pred_days = Vec::new();
        let mut true_days = Vec::new();
        for rec in plan.validation.records() {
            let x = load_input(&plan.validation, rec, pre)?;
            let pred = predict_class(model, &state.params, &x)?;
            pred_days.push(stats.mean_days(pred.class)?);
            true_days.push(rec.survival_days.ok_or_else(|| {
                Error::InvalidConfig(format!("validation record {} lacks days", rec.subject_id))
            })?);
        }
        fold_evals.push(FoldEvaluation { fold_id: plan.fold_id, pred_days, true_days });
        outcomes.push(FoldOutcome {
            fold_id: plan.fold_id,
            checkpoint: final_checkpoint_path(&fold_dir),
            out_dir: fold_dir,
        });
        fold_params.push(state.params);
    }
    let mut report = evaluation_report(&fold_evals, DEFAULT_Z_STAR)?;

    let mut holdout_predictions = None;
    if let Some(held) = holdout {
        // Held-out day predictions pool every labeled subject's days: the
        // deployed ensemble is trained on splits, but its day table is not.
        let stats = stats_from_records(
            plans[0].train.labeled_records().chain(plans[0].validation.records()),
        )?;
        let mut rows = Vec::new();
        let mut pred_days = Vec::new();
        let mut true_days = Vec::new();
        for rec in held.records() {
            let x = load_input(held, rec, pre)?;
            let votes = fold_params
                .iter()
                .map(|params| predict_class(model, params, &x))
                .collect::<Result<Vec<_>>>()?;
            let class = majority_vote(&votes)?;
            let days = stats.mean_days(class)?;
            rows.push(PredictionRow {
                subject_id: rec.subject_id.clone(),
                predicted_class: class,
                predicted_days: days,
            });
            if let Some(actual) = rec.survival_days {
                pred_days.push(days);
                true_days.push(actual);
            }
        }
        if !rows.is_empty() && true_days.len() == rows.len() {
            report.majority = Some(fold_report(0, &pred_days, &true_days, DEFAULT_Z_STAR)?);
        }
        holdout_predictions = Some(rows);
    }
    Ok(RegimeOutcome { folds: outcomes, report, holdout_predictions })
}
