//! Prediction, cross-validation, ensembling, and reported metrics.
//!
//! Cross-validation follows the three-independent-splits procedure: each fold
//! is its own seeded 75/25 random split of the labeled records (not a disjoint
//! 3-partition), reproducing the published 157/53 fold sizes from 210 subjects.
//! Survival-day regression is emulated by mapping each predicted class to the
//! mean survival of that class in the fold's training labels; accuracy on day
//! vectors re-bands both sides through the 10/15-month thresholds.
//!
//! All tie-breaks are deterministic: argmax prefers the lower class index, and
//! majority votes fall back to the highest summed posterior, then lower index.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::distributions::ClassPosterior;
use crate::error::{Error, Result};
use crate::networks::{classify_eval, ModelConfig, ModelParams};
use crate::rng::{block_rng, STREAM_SPLIT};
use crate::types::{SurvivalClass, CLASS_COUNT};
use crate::volumes::{DatasetManifest, OneHotVolume};

/// Critical value for the normal-approximation binomial confidence interval.
pub const DEFAULT_Z_STAR: f64 = 1.96;

/// Number of cross-validation folds.
pub const FOLD_COUNT: usize = 3;

/// One cross-validation fold: a seeded 75/25 split of the labeled subjects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvSplit {
    pub fold_id: usize,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub seed: u64,
}

/// Three independent seeded 75/25 splits of the manifest's labeled records.
pub fn make_cv_splits(manifest: &DatasetManifest, seed: u64) -> Result<[CvSplit; FOLD_COUNT]> {
    let ids: Vec<&str> = manifest
        .labeled_records()
        .map(|r| r.subject_id.as_str())
        .collect();
    if ids.len() < 4 {
        return Err(Error::InvalidConfig(format!(
            "cross-validation requires at least 4 labeled records, got {}",
            ids.len()
        )));
    }
    let n_train = ids.len() * 3 / 4;
    let folds: Vec<CvSplit> = (1..=FOLD_COUNT)
        .map(|fold_id| {
            let mut order: Vec<&str> = ids.clone();
            order.shuffle(&mut block_rng(seed, STREAM_SPLIT, fold_id as u64, 0));
            let mut train_ids: Vec<String> =
                order[..n_train].iter().map(|s| s.to_string()).collect();
            let mut validation_ids: Vec<String> =
                order[n_train..].iter().map(|s| s.to_string()).collect();
            train_ids.sort();
            validation_ids.sort();
            CvSplit { fold_id, train_ids, validation_ids, seed }
        })
        .collect();
    Ok(folds.try_into().expect("fold count"))
}

/// A single-model class prediction with its full posterior.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub class: SurvivalClass,
    pub posterior: ClassPosterior,
}

/// Argmax of the posterior; ties break toward the lower class index.
pub fn argmax_class(posterior: &ClassPosterior) -> Result<SurvivalClass> {
    let logits = posterior.logits();
    if logits.len() != CLASS_COUNT {
        return Err(Error::LengthMismatch {
            what: "class logits",
            expected: CLASS_COUNT,
            got: logits.len(),
        });
    }
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    SurvivalClass::from_index(best)
}

/// Classify one volume with trained parameters (eval mode, no dropout).
pub fn predict_class(
    model: &ModelConfig,
    params: &ModelParams,
    x: &OneHotVolume,
) -> Result<Prediction> {
    if x.spatial_shape() != model.input_shape {
        return Err(Error::ShapeMismatch {
            expected: model.input_shape.to_vec(),
            got: x.spatial_shape().to_vec(),
        });
    }
    let logits = classify_eval(params, &x.data().clone().into_dyn());
    let posterior = ClassPosterior::from_logits(logits)?;
    let class = argmax_class(&posterior)?;
    Ok(Prediction { class, posterior })
}

/// Ensemble vote: modal class, ties broken by summed posterior then lower index.
pub fn majority_vote(preds: &[Prediction]) -> Result<SurvivalClass> {
    if preds.is_empty() {
        return Err(Error::InvalidConfig(
            "majority vote requires at least one prediction".into(),
        ));
    }
    let mut counts = [0usize; CLASS_COUNT];
    let mut mass = [0.0f64; CLASS_COUNT];
    for pred in preds {
        counts[pred.class.index()] += 1;
        for (i, p) in pred.posterior.probabilities().iter().enumerate().take(CLASS_COUNT) {
            mass[i] += p;
        }
    }
    let top = *counts.iter().max().expect("nonempty counts");
    let mut best: Option<usize> = None;
    for i in 0..CLASS_COUNT {
        if counts[i] == top && best.is_none_or(|b| mass[i] > mass[b]) {
            best = Some(i);
        }
    }
    SurvivalClass::from_index(best.expect("nonempty vote"))
}

/// Half-width of the normal-approximation binomial CI: z*·sqrt(a(1−a)/n).
pub fn binomial_ci_halfwidth(accuracy: f64, n: usize, z_star: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidConfig(
            "confidence interval requires n > 0".into(),
        ));
    }
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(Error::InvalidConfig(format!(
            "accuracy must lie in [0, 1], got {accuracy}"
        )));
    }
    if !z_star.is_finite() || z_star < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "z* must be finite and non-negative, got {z_star}"
        )));
    }
    Ok(z_star * (accuracy * (1.0 - accuracy) / n as f64).sqrt())
}

/// Per-class mean survival days computed from training labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    means: [Option<f64>; CLASS_COUNT],
}

impl ClassStats {
    /// Means over `(class, survival_days)` pairs; days must be finite.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (SurvivalClass, f64)>) -> Result<Self> {
        let mut sums = [0.0f64; CLASS_COUNT];
        let mut counts = [0usize; CLASS_COUNT];
        for (class, days) in pairs {
            if !days.is_finite() {
                return Err(Error::NonFinite { what: "survival days" });
            }
            sums[class.index()] += days;
            counts[class.index()] += 1;
        }
        let mut means = [None; CLASS_COUNT];
        for i in 0..CLASS_COUNT {
            if counts[i] > 0 {
                means[i] = Some(sums[i] / counts[i] as f64);
            }
        }
        Ok(ClassStats { means })
    }

    /// Mean survival days for `class`; errors if the class had no training data.
    pub fn mean_days(&self, class: SurvivalClass) -> Result<f64> {
        self.means[class.index()].ok_or_else(|| {
            Error::InvalidConfig(format!(
                "class {} absent from training data",
                class.name()
            ))
        })
    }
}

/// Map a predicted class to its training-set mean survival days.
pub fn class_to_days(class: SurvivalClass, stats: &ClassStats) -> Result<f64> {
    stats.mean_days(class)
}

/// Band survival days into a class at the 10/15-month thresholds.
pub fn days_to_class(days: f64) -> SurvivalClass {
    SurvivalClass::from_days(days)
}

/// The reported regression metrics over day vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalMetrics {
    pub accuracy: f64,
    pub mse: f64,
    pub median_se: f64,
    pub spearman: f64,
}

/// Average ranks (1-based); ties share the mean of their rank range.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    cov / (vx * vy).sqrt()
}

/// Spearman rank correlation with average ranks for ties.
///
/// NaN when either side is constant (the correlation is undefined there);
/// JSON reports render that as null.
pub fn spearman(pred: &[f64], actual: &[f64]) -> f64 {
    pearson(&average_ranks(pred), &average_ranks(actual))
}

/// Accuracy, MSE, median SE, and Spearman over predicted vs true days.
pub fn survival_metrics(pred_days: &[f64], true_days: &[f64]) -> Result<SurvivalMetrics> {
    if pred_days.len() != true_days.len() {
        return Err(Error::LengthMismatch {
            what: "survival day vectors",
            expected: true_days.len(),
            got: pred_days.len(),
        });
    }
    if pred_days.is_empty() {
        return Err(Error::InvalidConfig(
            "survival metrics require at least one prediction".into(),
        ));
    }
    for &d in pred_days.iter().chain(true_days) {
        if !d.is_finite() {
            return Err(Error::NonFinite { what: "survival days" });
        }
    }
    let n = pred_days.len() as f64;
    let correct = pred_days
        .iter()
        .zip(true_days)
        .filter(|&(&p, &t)| days_to_class(p) == days_to_class(t))
        .count();
    let mut sq: Vec<f64> = pred_days
        .iter()
        .zip(true_days)
        .map(|(&p, &t)| (p - t).powi(2))
        .collect();
    let mse = sq.iter().sum::<f64>() / n;
    sq.sort_by(|a, b| a.partial_cmp(b).expect("finite squares"));
    let median_se = if sq.len() % 2 == 1 {
        sq[sq.len() / 2]
    } else {
        (sq[sq.len() / 2 - 1] + sq[sq.len() / 2]) / 2.0
    };
    Ok(SurvivalMetrics {
        accuracy: correct as f64 / n,
        mse,
        median_se,
        spearman: spearman(pred_days, true_days),
    })
}

/// One fold's validation outcome as day vectors, ready for reporting.
#[derive(Debug, Clone)]
pub struct FoldEvaluation {
    pub fold_id: usize,
    pub pred_days: Vec<f64>,
    pub true_days: Vec<f64>,
}

/// Per-fold block of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_id: usize,
    pub n: usize,
    pub accuracy: f64,
    pub ci_halfwidth: f64,
    pub mse: f64,
    pub median_se: f64,
    pub spearman: f64,
}

/// Full evaluation report: per-fold rows plus the pooled average row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: Vec<FoldReport>,
    pub pooled: FoldReport,
    /// Majority-vote row over perturbed copies, when an ensemble was scored.
    #[serde(default)]
    pub majority: Option<FoldReport>,
}

/// Score one set of predictions as a report row.
pub fn fold_report(fold_id: usize, pred: &[f64], actual: &[f64], z_star: f64) -> Result<FoldReport> {
    let m = survival_metrics(pred, actual)?;
    Ok(FoldReport {
        fold_id,
        n: pred.len(),
        accuracy: m.accuracy,
        ci_halfwidth: binomial_ci_halfwidth(m.accuracy, pred.len(), z_star)?,
        mse: m.mse,
        median_se: m.median_se,
        spearman: m.spearman,
    })
}

/// Assemble the report; the pooled row concatenates all folds' subjects, so
/// its CI uses n = Σ fold sizes.
pub fn evaluation_report(folds: &[FoldEvaluation], z_star: f64) -> Result<EvalReport> {
    if folds.is_empty() {
        return Err(Error::InvalidConfig("report requires at least one fold".into()));
    }
    let mut rows = Vec::with_capacity(folds.len());
    let mut pred_all = Vec::new();
    let mut true_all = Vec::new();
    for fold in folds {
        rows.push(fold_report(fold.fold_id, &fold.pred_days, &fold.true_days, z_star)?);
        pred_all.extend_from_slice(&fold.pred_days);
        true_all.extend_from_slice(&fold.true_days);
    }
    let pooled = fold_report(0, &pred_all, &true_all, z_star)?;
    Ok(EvalReport { folds: rows, pooled, majority: None })
}

/// One row of the platform-submission-shaped predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub subject_id: String,
    pub predicted_class: SurvivalClass,
    pub predicted_days: f64,
}

/// Write predictions as CSV: subject_id, predicted_class, predicted_days.
pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut ids = BTreeSet::new();
    for row in rows {
        if !ids.insert(row.subject_id.as_str()) {
            return Err(Error::DuplicateSubject { id: row.subject_id.clone() });
        }
    }
    let mut writer = csv::Writer::from_path(path).map_err(Error::from)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a predictions CSV written by [`write_predictions_csv`].
pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(Error::from)?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record?);
    }
    Ok(rows)
}
