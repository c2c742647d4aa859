//! `ssvae`: reproducible experiment plumbing over the library crate.
//!
//! One binary, six subcommands — synth, train, eval, predict, generate,
//! splits — each a pure function of (config file, flags, seed): rerunning
//! with identical inputs writes byte-identical artifacts. Exit codes follow
//! the usual convention: 0 success, 2 for usage or configuration problems
//! caught before any work starts, 1 for failures during execution.
//!
//! Subcommand configs are JSON files. The defaults baked into every config
//! struct are the published full-scale hyperparameters; `--desk-scale`
//! swaps in the minutes-per-run presets instead. `SSVAE_NUM_WORKERS` caps
//! the worker threads the objective evaluator fans batches out to.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use ssvae_core::checkpoint::{load_checkpoint, params_checksum, SavedCheckpoint};
use ssvae_core::distributions::standard_normal_vec;
use ssvae_core::evaluation::{
    evaluation_report, fold_report, majority_vote, make_cv_splits, predict_class, ClassStats,
    FoldEvaluation, FoldReport, Prediction, PredictionRow, DEFAULT_Z_STAR, FOLD_COUNT,
};
use ssvae_core::networks::{decode_probs, ModelConfig, ModelParams};
use ssvae_core::rng::{block_rng, STREAM_GAUSSIAN};
use ssvae_core::synthdata::{
    generate_dataset, read_answers, roughness, GenerateOptions, SynthSpec, ANSWERS_FILE,
};
use ssvae_core::training::{
    final_checkpoint_path, resume, train, TrainConfig, TrainData,
};
use ssvae_core::types::SurvivalClass;
use ssvae_core::volumes::{
    load_label_volume, preprocess, write_raw, DatasetManifest, ManifestRecord, OneHotVolume,
    PreprocessConfig, RemapTable,
};

#[derive(Parser)]
#[command(name = "ssvae", version, about = "Survival-group SSVAE pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled/unlabeled dataset with answer key.
    Synth(SynthArgs),
    /// Train a model on one or more manifests (labeled and/or unlabeled).
    Train(TrainArgs),
    /// Evaluate fold checkpoints on a labeled manifest; write report JSON.
    Eval(EvalArgs),
    /// Write submission-shaped class/day predictions for a manifest.
    Predict(PredictArgs),
    /// Decode class-conditioned samples from the prior with shared z.
    Generate(GenerateArgs),
    /// Write the 3-fold cross-validation splits of a labeled manifest.
    Splits(SplitsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generation config JSON: {"spec": ..., "options": ...}.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for volumes, manifest.csv, and answers.csv.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifests, merged (duplicate subject ids rejected).
    #[arg(required = true)]
    manifests: Vec<PathBuf>,
    /// Run config JSON: {"model": ..., "train": ..., "preprocess": ...}.
    #[arg(long, conflicts_with = "desk_scale")]
    config: Option<PathBuf>,
    /// Use the desk-scale presets instead of the full-scale defaults.
    #[arg(long)]
    desk_scale: bool,
    /// Output directory for checkpoints and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Override the train seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue a checkpointed run to the configured step count.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Eval config JSON: {"checkpoints": [...], "manifest": ...}.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for report.json.
    #[arg(long)]
    out: PathBuf,
    /// Default the preprocessing to the desk-scale preset.
    #[arg(long)]
    desk_scale: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Predict config JSON: {"checkpoints": [...], "manifest": ..., "stats_manifest": ...}.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for predictions.csv.
    #[arg(long)]
    out: PathBuf,
    /// Default the preprocessing to the desk-scale preset.
    #[arg(long)]
    desk_scale: bool,
}

#[derive(Args)]
struct GenerateArgs {
    /// Generate config JSON: {"checkpoint": ..., "samples": ...}.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for label maps and probability volumes.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SplitsArgs {
    /// Labeled manifest to split.
    manifest: PathBuf,
    /// Split seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fold count; the protocol fixes this at 3.
    #[arg(long, default_value_t = FOLD_COUNT)]
    folds: usize,
    /// Output directory for splits.json.
    #[arg(long)]
    out: PathBuf,
}

/// A failure tagged with the phase it occurred in, which fixes the exit
/// code: configuration problems (bad config file, invalid settings) exit 2
/// before any artifact is touched; execution failures exit 1.
#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(msg) | Failure::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl Failure {
    fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Config(_) => ExitCode::from(2),
            Failure::Runtime(_) => ExitCode::from(1),
        }
    }
}

/// During-execution errors map to exit 1.
fn run<T>(result: ssvae_core::error::Result<T>) -> Result<T, Failure> {
    result.map_err(|e| Failure::Runtime(e.to_string()))
}

/// Pre-execution (configuration) errors map to exit 2.
fn cfg<T>(result: ssvae_core::error::Result<T>) -> Result<T, Failure> {
    result.map_err(|e| Failure::Config(e.to_string()))
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("invalid config {}: {e}", path.display())))
}

fn create_out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_artifact(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn init_workers() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("SSVAE_NUM_WORKERS") else { return Ok(()) };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::Config(format!("SSVAE_NUM_WORKERS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("cannot configure worker pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_workers().and_then(|()| match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Predict(args) => run_predict(args),
        Command::Generate(args) => run_generate(args),
        Command::Splits(args) => run_splits(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            failure.exit_code()
        }
    }
}

// ---------------------------------------------------------------- synth --

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct SynthJobConfig {
    spec: SynthSpec,
    options: GenerateOptions,
}

fn run_synth(args: SynthArgs) -> Result<(), Failure> {
    let job: SynthJobConfig = read_config(&args.config)?;
    cfg(job.spec.validate())?;
    cfg(job.options.validate())?;
    let seed = args.seed.unwrap_or(job.spec.seed);

    create_out_dir(&args.out)?;
    let manifest = run(generate_dataset(&job.spec, &job.options, seed, &args.out))?;
    let answers = run(read_answers(&args.out.join(ANSWERS_FILE)))?;
    let mut histogram = [0usize; 3];
    for row in &answers {
        histogram[row.true_class.index()] += 1;
    }
    println!(
        "wrote {} labeled + {} unlabeled records to {}",
        manifest.n_labeled(),
        manifest.n_unlabeled(),
        args.out.display()
    );
    println!(
        "true class histogram: short {} / mid {} / long {}",
        histogram[0], histogram[1], histogram[2]
    );
    Ok(())
}

// ---------------------------------------------------------------- train --

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainJobConfig {
    model: ModelConfig,
    train: TrainConfig,
    preprocess: PreprocessConfig,
}

impl Default for TrainJobConfig {
    fn default() -> Self {
        TrainJobConfig {
            model: ModelConfig::full_scale(),
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl TrainJobConfig {
    fn desk_scale() -> Self {
        TrainJobConfig {
            model: ModelConfig::desk_scale(),
            train: TrainConfig::desk_scale(),
            preprocess: PreprocessConfig::desk_scale(),
        }
    }
}

/// Merge manifests into one, re-pointing records at resolved paths so they
/// stay loadable regardless of each manifest's location.
fn merge_manifests(paths: &[PathBuf]) -> ssvae_core::error::Result<DatasetManifest> {
    let mut records: Vec<ManifestRecord> = Vec::new();
    for path in paths {
        let manifest = DatasetManifest::read_csv(path)?;
        for rec in manifest.records() {
            let mut rec = rec.clone();
            rec.volume_path = manifest.resolved_path(&rec);
            records.push(rec);
        }
    }
    DatasetManifest::new(records)
}

fn run_train(args: TrainArgs) -> Result<(), Failure> {
    let mut job = match &args.config {
        Some(path) => read_config::<TrainJobConfig>(path)?,
        None if args.desk_scale => TrainJobConfig::desk_scale(),
        None => TrainJobConfig::default(),
    };
    if let Some(seed) = args.seed {
        job.train.seed = seed;
    }
    cfg(job.model.validate())?;
    cfg(job.train.validate())?;
    cfg(job.preprocess.validate())?;

    let manifest = run(merge_manifests(&args.manifests))?;
    let data = run(TrainData::from_manifest(&manifest, &job.preprocess))?;
    println!(
        "training on {} labeled + {} unlabeled records for {} steps",
        data.n_labeled(),
        data.n_unlabeled(),
        job.train.total_steps
    );
    create_out_dir(&args.out)?;
    let state = run(match &args.resume {
        Some(ckpt) => resume(ckpt, &job.model, &job.train, &data, &args.out),
        None => train(&job.model, &job.train, &data, &args.out),
    })?;
    println!("final checkpoint: {}", final_checkpoint_path(&args.out).display());
    println!("params checksum: {:016x}", params_checksum(&state.params));
    Ok(())
}

// ----------------------------------------------------------------- eval --

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalJobConfig {
    /// One row per checkpoint; exactly three adds the majority-vote row.
    checkpoints: Vec<PathBuf>,
    /// Labeled manifest to evaluate on.
    manifest: PathBuf,
    /// Labeled manifest supplying per-class day means (defaults to
    /// `manifest`).
    #[serde(default)]
    stats_manifest: Option<PathBuf>,
    /// Defaults to the full-scale pipeline, or desk-scale under
    /// `--desk-scale`.
    #[serde(default)]
    preprocess: Option<PreprocessConfig>,
    #[serde(default = "default_z_star")]
    z_star: f64,
}

fn default_z_star() -> f64 {
    DEFAULT_Z_STAR
}

fn effective_preprocess(
    explicit: Option<PreprocessConfig>,
    desk_scale: bool,
) -> Result<PreprocessConfig, Failure> {
    let pre = explicit
        .unwrap_or_else(|| if desk_scale { PreprocessConfig::desk_scale() } else { PreprocessConfig::default() });
    cfg(pre.validate())?;
    Ok(pre)
}

/// Load checkpoints and require every one to agree on the model config.
fn load_models(paths: &[PathBuf]) -> Result<Vec<SavedCheckpoint>, Failure> {
    let saved = paths
        .iter()
        .map(|p| run(load_checkpoint(p)))
        .collect::<Result<Vec<_>, _>>()?;
    for pair in saved.windows(2) {
        if pair[0].model != pair[1].model {
            return Err(Failure::Runtime(
                "checkpoints disagree on the model configuration".into(),
            ));
        }
    }
    Ok(saved)
}

/// Preprocess every manifest record once, keeping ids and any true days.
fn load_inputs(
    manifest: &DatasetManifest,
    pre: &PreprocessConfig,
) -> ssvae_core::error::Result<Vec<(String, OneHotVolume, Option<f64>)>> {
    manifest
        .records()
        .iter()
        .map(|rec| {
            let seg = load_label_volume(&manifest.resolved_path(rec), None)?;
            Ok((rec.subject_id.clone(), preprocess(&seg, pre)?, rec.survival_days))
        })
        .collect()
}

fn class_stats_for(
    stats_manifest: &Option<PathBuf>,
    fallback: &DatasetManifest,
) -> ssvae_core::error::Result<ClassStats> {
    let pairs = |m: &DatasetManifest| {
        m.labeled_records()
            .filter_map(|r| Some((r.class_label?, r.survival_days?)))
            .collect::<Vec<_>>()
    };
    ClassStats::from_pairs(match stats_manifest {
        Some(path) => pairs(&DatasetManifest::read_csv(path)?),
        None => pairs(fallback),
    })
}

fn print_row(label: &str, row: &FoldReport) {
    println!(
        "{label}: accuracy {:.2}% ± {:.2}% (n={})  mse {:.1}  median_se {:.1}  spearman {}",
        100.0 * row.accuracy,
        100.0 * row.ci_halfwidth,
        row.n,
        row.mse,
        row.median_se,
        if row.spearman.is_nan() { "n/a".to_string() } else { format!("{:.3}", row.spearman) },
    );
}

fn run_eval(args: EvalArgs) -> Result<(), Failure> {
    let job: EvalJobConfig = read_config(&args.config)?;
    if job.checkpoints.is_empty() || job.checkpoints.len() > FOLD_COUNT {
        return Err(Failure::Config(format!(
            "eval takes 1..={FOLD_COUNT} checkpoints, got {}",
            job.checkpoints.len()
        )));
    }
    if !job.z_star.is_finite() || job.z_star <= 0.0 {
        return Err(Failure::Config(format!("z_star must be > 0, got {}", job.z_star)));
    }
    let pre = effective_preprocess(job.preprocess, args.desk_scale)?;

    let manifest = run(DatasetManifest::read_csv(&job.manifest))?;
    if manifest.n_labeled() == 0 {
        return Err(Failure::Runtime("evaluation manifest has no labeled records".into()));
    }
    if manifest.n_unlabeled() > 0 {
        return Err(Failure::Runtime(
            "evaluation manifest must be fully labeled (true days required)".into(),
        ));
    }
    let stats = run(class_stats_for(&job.stats_manifest, &manifest))?;
    let models = load_models(&job.checkpoints)?;
    let inputs = run(load_inputs(&manifest, &pre))?;

    let mut fold_evals = Vec::new();
    let mut votes: Vec<Vec<Prediction>> = vec![Vec::new(); inputs.len()];
    for (i, saved) in models.iter().enumerate() {
        let mut pred_days = Vec::new();
        let mut true_days = Vec::new();
        for (slot, (_, x, days)) in votes.iter_mut().zip(&inputs) {
            let pred = run(predict_class(&saved.model, &saved.state.params, x))?;
            pred_days.push(run(stats.mean_days(pred.class))?);
            true_days.push(days.expect("manifest checked fully labeled"));
            slot.push(pred);
        }
        fold_evals.push(FoldEvaluation { fold_id: i + 1, pred_days, true_days });
    }
    let mut report = run(evaluation_report(&fold_evals, job.z_star))?;
    if models.len() == FOLD_COUNT {
        let mut pred_days = Vec::new();
        let mut true_days = Vec::new();
        for (slot, (_, _, days)) in votes.iter().zip(&inputs) {
            let class = run(majority_vote(slot))?;
            pred_days.push(run(stats.mean_days(class))?);
            true_days.push(days.expect("manifest checked fully labeled"));
        }
        report.majority = Some(run(fold_report(0, &pred_days, &true_days, job.z_star))?);
    }

    create_out_dir(&args.out)?;
    let path = args.out.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_artifact(&path, format!("{json}\n").as_bytes())?;
    for row in &report.folds {
        print_row(&format!("fold {}", row.fold_id), row);
    }
    print_row("pooled", &report.pooled);
    if let Some(majority) = &report.majority {
        print_row("majority", majority);
    }
    println!("report: {}", path.display());
    Ok(())
}

// -------------------------------------------------------------- predict --

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictJobConfig {
    /// Models to ensemble by majority vote (any count ≥ 1).
    checkpoints: Vec<PathBuf>,
    /// Records to predict; labels, if any, are ignored.
    manifest: PathBuf,
    /// Labeled manifest supplying per-class day means (defaults to
    /// `manifest`, which must then be labeled).
    #[serde(default)]
    stats_manifest: Option<PathBuf>,
    #[serde(default)]
    preprocess: Option<PreprocessConfig>,
}

fn run_predict(args: PredictArgs) -> Result<(), Failure> {
    let job: PredictJobConfig = read_config(&args.config)?;
    if job.checkpoints.is_empty() {
        return Err(Failure::Config("predict requires at least one checkpoint".into()));
    }
    let pre = effective_preprocess(job.preprocess, args.desk_scale)?;

    let manifest = run(DatasetManifest::read_csv(&job.manifest))?;
    let stats = run(class_stats_for(&job.stats_manifest, &manifest))?;
    let models = load_models(&job.checkpoints)?;
    let inputs = run(load_inputs(&manifest, &pre))?;

    let mut rows = Vec::with_capacity(inputs.len());
    for (subject_id, x, _) in &inputs {
        let votes = models
            .iter()
            .map(|saved| run(predict_class(&saved.model, &saved.state.params, x)))
            .collect::<Result<Vec<_>, _>>()?;
        let class = run(majority_vote(&votes))?;
        rows.push(PredictionRow {
            subject_id: subject_id.clone(),
            predicted_class: class,
            predicted_days: run(stats.mean_days(class))?,
        });
    }
    create_out_dir(&args.out)?;
    let path = args.out.join("predictions.csv");
    run(ssvae_core::evaluation::write_predictions_csv(&path, &rows))?;
    println!("wrote {} predictions to {}", rows.len(), path.display());
    Ok(())
}

// ------------------------------------------------------------- generate --

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateJobConfig {
    checkpoint: PathBuf,
    /// Samples per class; each sample s shares one z across all classes.
    #[serde(default = "default_samples")]
    samples: usize,
    #[serde(default)]
    seed: u64,
}

fn default_samples() -> usize {
    20
}

fn write_prob_volume(dir: &Path, stem: &str, probs: &ndarray::ArrayD<f64>) -> Result<(), Failure> {
    let mut bytes = Vec::with_capacity(probs.len() * 8);
    for &v in probs.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_artifact(&dir.join(format!("{stem}.raw")), &bytes)?;
    let sidecar =
        serde_json::json!({ "shape": probs.shape(), "dtype": "f64-le", "order": "row-major" });
    write_artifact(
        &dir.join(format!("{stem}.json")),
        format!("{}\n", serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"))
            .as_bytes(),
    )
}

fn run_generate(args: GenerateArgs) -> Result<(), Failure> {
    let job: GenerateJobConfig = read_config(&args.config)?;
    if job.samples == 0 {
        return Err(Failure::Config("samples must be positive".into()));
    }
    let seed = args.seed.unwrap_or(job.seed);
    let saved = run(load_checkpoint(&job.checkpoint))?;
    let (model, params): (&ModelConfig, &ModelParams) = (&saved.model, &saved.state.params);

    create_out_dir(&args.out)?;
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let mut empty = [0usize; 3];
    for s in 0..job.samples {
        // One prior draw per sample, shared across classes, isolates the
        // class-conditioning effect.
        let mut rng = block_rng(seed, STREAM_GAUSSIAN, s as u64, 0);
        let z = standard_normal_vec(&mut rng, model.latent_size);
        for class in SurvivalClass::ALL {
            let emb = params.embedding_row(class.index());
            let probs = decode_probs(model, params, &z, &emb);
            let channels = probs
                .clone()
                .into_dimensionality()
                .map_err(|e| Failure::Runtime(format!("decoder output rank: {e}")))?;
            let volume = run(OneHotVolume::new(channels))?;
            let labels = volume.argmax_labels();
            let stem = format!("gen_{}_{s:02}", class.name());
            run(write_raw(
                &args.out.join(format!("{stem}.vol")),
                labels.data(),
                Some(&RemapTable::identity()),
            ))?;
            write_prob_volume(&args.out, &format!("{stem}_probs"), &probs)?;
            match roughness(&labels) {
                Ok(r) => {
                    sums[class.index()] += r.0;
                    counts[class.index()] += 1;
                }
                Err(_) => empty[class.index()] += 1,
            }
        }
    }
    for class in SurvivalClass::ALL {
        let i = class.index();
        let mean = if counts[i] > 0 {
            format!("{:.4}", sums[i] / counts[i] as f64)
        } else {
            "n/a".to_string()
        };
        println!(
            "{}: mean roughness {mean} over {} samples ({} empty)",
            class.name(),
            counts[i],
            empty[i]
        );
    }
    println!("wrote {} volumes to {}", 3 * job.samples, args.out.display());
    Ok(())
}

// --------------------------------------------------------------- splits --

fn run_splits(args: SplitsArgs) -> Result<(), Failure> {
    if args.folds != FOLD_COUNT {
        return Err(Failure::Config(format!(
            "the protocol fixes {FOLD_COUNT} folds, got {}",
            args.folds
        )));
    }
    let manifest = run(DatasetManifest::read_csv(&args.manifest))?;
    let splits = run(make_cv_splits(&manifest, args.seed))?;

    // The ids named by the splits must be mutually exclusive per fold;
    // surface a duplicate-id manifest early rather than in training.
    for split in &splits {
        let train: BTreeSet<&str> = split.train_ids.iter().map(String::as_str).collect();
        if split.validation_ids.iter().any(|v| train.contains(v.as_str())) {
            return Err(Failure::Runtime("split produced overlapping folds".into()));
        }
    }
    create_out_dir(&args.out)?;
    let path = args.out.join("splits.json");
    let json = serde_json::to_string_pretty(&splits.to_vec()).expect("splits serialize");
    write_artifact(&path, format!("{json}\n").as_bytes())?;
    for split in &splits {
        println!(
            "fold {}: {} train / {} validation",
            split.fold_id,
            split.train_ids.len(),
            split.validation_ids.len()
        );
    }
    println!("splits: {}", path.display());
    Ok(())
}
