//! Sub-command implementations: each validates its inputs, delegates the
//! real work to the library, and prints a short deterministic report.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use oxiwarn::artifact::{
    fingerprint_bytes, load_artifact, save_artifact, PredictorArtifact,
};
use oxiwarn::baseline::{fit_ar1, train_base_rate, train_logistic, Ar1Config, LogisticConfig};
use oxiwarn::eval::{
    bootstrap_compare, check_dominance, evaluate, pr_curve, roc_curve, EvalReport, Metric,
    ScoredSet,
};
use oxiwarn::explain::{explain_window, BackgroundSet};
use oxiwarn::gbt::{train_gbt, GBTConfig};
use oxiwarn::model::{ModelError, ModelKind, TrainedModel};
use oxiwarn::neural::{train_cnn, train_lstm, CnnConfig, LstmConfig};
use oxiwarn::pipeline::{
    apply_normalization, assemble_examples, build_label_cache, extract_window, fit_normalization,
    load_label_cache, load_norm_stats, prevalence, raw_windows_for_split, save_label_cache,
    save_norm_stats, CachedPoint, Split, SplitFractions, WindowedExample,
    WINDOW_WIDTH,
};
use oxiwarn::serve::{run_server, serve_stream, InferenceEngine};
use oxiwarn::trace::{generate_synthetic_cases, load_traces, save_traces, SpO2Trace, SynthConfig};

use crate::config::{resolve, resolve_opt, resolve_required, ConfigFile};
use crate::error::{runtime, usage, validation, CliError};

/// File names inside a prepared data directory.
const LABELS_FILE: &str = "labels.csv";
const NORM_FILE: &str = "norm.json";

/// How many training-split windows back an attribution by default.
const DEFAULT_BACKGROUND: usize = 256;

#[derive(Parser)]
#[command(
    name = "oxiwarn",
    version,
    about = "SpO2 early-warning toolkit: generate traces, prepare labeled windows, \
             train and compare risk models, explain predictions, and serve them.",
    after_help = "Exit codes: 0 success, 2 usage error, 3 input validation error, \
                  4 runtime failure.\nEvery sub-command accepts --config FILE with \
                  `key = value` lines (keys are the long flag names); command-line \
                  flags win on conflict."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic SpO2 trace file.
    Generate(GenerateArgs),
    /// Label every minute, split by case, and fit normalization stats.
    Prepare(PrepareArgs),
    /// Train one model and write a self-contained scoring artifact.
    Train(TrainArgs),
    /// Score artifacts on one split and print the ranking table.
    Evaluate(EvaluateArgs),
    /// Paired-bootstrap comparison of two artifacts on the same split.
    Compare(CompareArgs),
    /// Render per-minute attributions for one case minute.
    Explain(ExplainArgs),
    /// Stream risk predictions over line-delimited JSON.
    Serve(ServeArgs),
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Serve(args) => cmd_serve(args),
    }
}

// ---------------------------------------------------------------- generate

#[derive(Args)]
pub struct GenerateArgs {
    /// Number of synthetic cases.
    #[arg(long, value_name = "N")]
    cases: Option<usize>,
    /// Master random seed.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Output trace file.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Shortest case duration in minutes.
    #[arg(long, value_name = "MIN")]
    duration_min: Option<usize>,
    /// Longest case duration in minutes.
    #[arg(long, value_name = "MIN")]
    duration_max: Option<usize>,
    /// Lowest per-case resting baseline SpO2.
    #[arg(long, value_name = "PCT")]
    baseline_min: Option<f64>,
    /// Highest per-case resting baseline SpO2.
    #[arg(long, value_name = "PCT")]
    baseline_max: Option<f64>,
    /// Expected desaturation events per case-hour.
    #[arg(long, value_name = "RATE")]
    event_rate: Option<f64>,
    /// Shallowest possible event nadir.
    #[arg(long, value_name = "PCT")]
    event_depth_min: Option<f64>,
    /// Deepest possible event nadir.
    #[arg(long, value_name = "PCT")]
    event_depth_max: Option<f64>,
    /// Half-life of the desaturation descent, minutes.
    #[arg(long, value_name = "MIN")]
    event_halflife: Option<f64>,
    /// Standard deviation of measurement-noise innovations.
    #[arg(long, value_name = "STD")]
    noise_std: Option<f64>,
    /// Probability that a minute's reading is missing.
    #[arg(long, value_name = "P")]
    missing_rate: Option<f64>,
    /// Key-value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let mut file = ConfigFile::from_flag(args.config.as_deref())?;
    let defaults = SynthConfig::default();
    let cases = resolve(args.cases, &mut file, "cases", defaults.n_cases)?;
    let seed = resolve(args.seed, &mut file, "seed", defaults.seed)?;
    let out: PathBuf = resolve_required(args.out, &mut file, "out")?;
    let cfg = SynthConfig {
        n_cases: cases,
        duration_minutes: (
            resolve(args.duration_min, &mut file, "duration-min", defaults.duration_minutes.0)?,
            resolve(args.duration_max, &mut file, "duration-max", defaults.duration_minutes.1)?,
        ),
        baseline_spo2: (
            resolve(args.baseline_min, &mut file, "baseline-min", defaults.baseline_spo2.0)?,
            resolve(args.baseline_max, &mut file, "baseline-max", defaults.baseline_spo2.1)?,
        ),
        event_rate_per_hour: resolve(
            args.event_rate,
            &mut file,
            "event-rate",
            defaults.event_rate_per_hour,
        )?,
        event_depth: (
            resolve(args.event_depth_min, &mut file, "event-depth-min", defaults.event_depth.0)?,
            resolve(args.event_depth_max, &mut file, "event-depth-max", defaults.event_depth.1)?,
        ),
        event_halflife_minutes: resolve(
            args.event_halflife,
            &mut file,
            "event-halflife",
            defaults.event_halflife_minutes,
        )?,
        noise_std: resolve(args.noise_std, &mut file, "noise-std", defaults.noise_std)?,
        missing_rate: resolve(args.missing_rate, &mut file, "missing-rate", defaults.missing_rate)?,
        seed,
    };
    file.finish()?;
    if cfg.n_cases == 0 {
        return Err(usage("--cases must be at least 1"));
    }

    let traces = validation(generate_synthetic_cases(&cfg), "generate traces")?;
    runtime(save_traces(&traces, &out), "write trace file")?;
    let minutes: usize = traces.iter().map(|t| t.duration()).sum();
    println!("wrote {} cases ({} minutes) to {}", traces.len(), minutes, out.display());
    Ok(())
}

// ----------------------------------------------------------------- prepare

#[derive(Args)]
pub struct PrepareArgs {
    /// Input trace file (from `generate`).
    #[arg(long, value_name = "PATH")]
    traces: Option<PathBuf>,
    /// Directory for labels.csv and norm.json.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Seed for the case-level split shuffle.
    #[arg(long, value_name = "SEED")]
    split_seed: Option<u64>,
    /// Fraction of cases assigned to training.
    #[arg(long, value_name = "F")]
    train_frac: Option<f64>,
    /// Fraction of cases assigned to validation.
    #[arg(long, value_name = "F")]
    val_frac: Option<f64>,
    /// Fraction of cases assigned to testing.
    #[arg(long, value_name = "F")]
    test_frac: Option<f64>,
    /// Keep borderline negatives instead of applying the review filter that
    /// drops negatives deteriorating 5-10 minutes out.
    #[arg(long)]
    no_doctor_filter: bool,
    /// Key-value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

fn cmd_prepare(args: PrepareArgs) -> Result<(), CliError> {
    let mut file = ConfigFile::from_flag(args.config.as_deref())?;
    let traces_path: PathBuf = resolve_required(args.traces, &mut file, "traces")?;
    let out_dir: PathBuf = resolve_required(args.out_dir, &mut file, "out-dir")?;
    let split_seed = resolve(args.split_seed, &mut file, "split-seed", 7)?;
    let default_fracs = SplitFractions::default();
    let fractions = SplitFractions {
        train: resolve(args.train_frac, &mut file, "train-frac", default_fracs.train)?,
        validation: resolve(args.val_frac, &mut file, "val-frac", default_fracs.validation)?,
        test: resolve(args.test_frac, &mut file, "test-frac", default_fracs.test)?,
    };
    let doctor_filter = if args.no_doctor_filter {
        false
    } else {
        file.take::<bool>("doctor-filter")?.unwrap_or(true)
    };
    file.finish()?;

    let traces = validation(load_traces(&traces_path), "load traces")?;
    let labeling = Default::default();
    let cache = validation(
        build_label_cache(&traces, &labeling, fractions, doctor_filter, split_seed),
        "label and split",
    )?;

    // Normalization is fit on training windows only, then applied everywhere.
    let (train_windows, _) = validation(
        raw_windows_for_split(&traces, &cache, Split::Train, WINDOW_WIDTH),
        "extract training windows",
    )?;
    let stats = validation(fit_normalization(&train_windows), "fit normalization")?;

    runtime(std::fs::create_dir_all(&out_dir), "create output directory")?;
    let labels_path = out_dir.join(LABELS_FILE);
    let norm_path = out_dir.join(NORM_FILE);
    runtime(save_label_cache(&cache, &labels_path), "write label cache")?;
    runtime(save_norm_stats(&stats, &norm_path), "write normalization stats")?;

    let included = cache.iter().filter(|p| p.included).count();
    let positives = cache
        .iter()
        .filter(|p| p.included && p.label == 1)
        .count();
    let mut split_cases: HashMap<&str, Split> = HashMap::new();
    for p in &cache {
        split_cases.insert(p.case_id.as_str(), p.split);
    }
    let count_cases =
        |s: Split| split_cases.values().filter(|&&v| v == s).count();
    println!(
        "labeled {} time points across {} cases ({} included, {} excluded)",
        cache.len(),
        traces.len(),
        included,
        cache.len() - included
    );
    println!(
        "prevalence: {:.4}% ({}/{})",
        prevalence(&cache) * 100.0,
        positives,
        included
    );
    println!(
        "splits: {} train / {} validation / {} test cases",
        count_cases(Split::Train),
        count_cases(Split::Validation),
        count_cases(Split::Test)
    );
    println!("wrote {} and {}", labels_path.display(), norm_path.display());
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args)]
pub struct TrainArgs {
    /// Model kind: base-rate, ar1, logistic, gbt, cnn, or lstm.
    #[arg(long, value_name = "KIND")]
    model: Option<String>,
    /// Input trace file.
    #[arg(long, value_name = "PATH")]
    traces: Option<PathBuf>,
    /// Prepared data directory (from `prepare`).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output artifact path.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Hyperparameter preset: desk (fast) or paper (full size).
    #[arg(long, value_name = "PRESET")]
    scale: Option<String>,
    /// Training seed.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Optimizer steps (epochs for logistic; cnn/lstm/logistic only).
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
    /// Minibatch size (cnn/lstm only).
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Learning rate (logistic/gbt/cnn/lstm).
    #[arg(long, value_name = "LR")]
    learning_rate: Option<f64>,
    /// Number of boosting rounds (gbt only).
    #[arg(long, value_name = "N")]
    trees: Option<usize>,
    /// Maximum tree depth (gbt only).
    #[arg(long, value_name = "N")]
    depth: Option<usize>,
    /// Dropout rate (cnn/lstm only).
    #[arg(long, value_name = "P")]
    dropout: Option<f64>,
    /// Key-value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

/// Hyperparameter overrides that only apply to some model kinds; passing one
/// to the wrong kind is rejected rather than silently ignored.
struct Overrides {
    steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    trees: Option<usize>,
    depth: Option<usize>,
    dropout: Option<f64>,
}

impl Overrides {
    fn reject_unused(&self, kind: ModelKind) -> Result<(), CliError> {
        let mut stray = Vec::new();
        let steps_ok = matches!(kind, ModelKind::Logistic | ModelKind::Cnn | ModelKind::Lstm);
        let net_ok = matches!(kind, ModelKind::Cnn | ModelKind::Lstm);
        let lr_ok = matches!(
            kind,
            ModelKind::Logistic | ModelKind::Gbt | ModelKind::Cnn | ModelKind::Lstm
        );
        if self.steps.is_some() && !steps_ok {
            stray.push("--steps");
        }
        if self.batch_size.is_some() && !net_ok {
            stray.push("--batch-size");
        }
        if self.learning_rate.is_some() && !lr_ok {
            stray.push("--learning-rate");
        }
        if self.trees.is_some() && kind != ModelKind::Gbt {
            stray.push("--trees");
        }
        if self.depth.is_some() && kind != ModelKind::Gbt {
            stray.push("--depth");
        }
        if self.dropout.is_some() && !net_ok {
            stray.push("--dropout");
        }
        if stray.is_empty() {
            Ok(())
        } else {
            Err(usage(format!(
                "{} does not apply to the {} model",
                stray.join(", "),
                kind.as_str()
            )))
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Scale {
    Desk,
    Paper,
}

fn parse_scale(s: &str) -> Result<Scale, CliError> {
    match s {
        "desk" => Ok(Scale::Desk),
        "paper" => Ok(Scale::Paper),
        other => Err(usage(format!("--scale must be `desk` or `paper`, got `{other}`"))),
    }
}

fn parse_kind(s: &str) -> Result<ModelKind, CliError> {
    ModelKind::parse(&s.replace('-', "_")).ok_or_else(|| {
        usage(format!(
            "unknown model `{s}`; expected one of base-rate, ar1, logistic, gbt, cnn, lstm"
        ))
    })
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    Split::parse(s)
        .ok_or_else(|| usage(format!("--split must be train, validation, or test, got `{s}`")))
}

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::Diverged { .. } => CliError::Runtime(e.to_string()),
        ModelError::Config { .. } => CliError::Usage(e.to_string()),
        ModelError::InvalidInput(_) => CliError::Validation(e.to_string()),
    }
}

/// Per-split aligned windows: raw for scoring, normalized for training.
#[derive(Default)]
struct SplitSet {
    raw: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
    labels: Vec<u8>,
}

fn partition_examples(
    examples: Vec<WindowedExample>,
    cache: &[CachedPoint],
) -> Result<[SplitSet; 3], CliError> {
    let tags: Vec<Split> = cache
        .iter()
        .filter(|p| p.included)
        .map(|p| p.split)
        .collect();
    if tags.len() != examples.len() {
        return Err(CliError::Runtime(format!(
            "label cache and assembled examples disagree: {} vs {}",
            tags.len(),
            examples.len()
        )));
    }
    let mut sets: [SplitSet; 3] = Default::default();
    for (example, split) in examples.into_iter().zip(tags) {
        let set = &mut sets[match split {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }];
        set.raw.push(example.raw_window);
        set.features.push(example.features);
        set.labels.push(example.label);
    }
    Ok(sets)
}

fn load_prepared(
    traces_path: &Path,
    data_dir: &Path,
) -> Result<(Vec<SpO2Trace>, Vec<CachedPoint>), CliError> {
    let traces = validation(load_traces(traces_path), "load traces")?;
    let cache = validation(
        load_label_cache(&data_dir.join(LABELS_FILE)),
        "load label cache",
    )?;
    Ok((traces, cache))
}

/// Ties an artifact to the exact prepared inputs it was trained from.
fn prepared_fingerprint(data_dir: &Path) -> Result<String, CliError> {
    let mut bytes = validation(
        std::fs::read(data_dir.join(LABELS_FILE)),
        "read label cache",
    )?;
    bytes.extend(validation(
        std::fs::read(data_dir.join(NORM_FILE)),
        "read normalization stats",
    )?);
    Ok(fingerprint_bytes(&bytes))
}

fn mean_log_loss(probs: &[f64], labels: &[u8]) -> f64 {
    let mut sum = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        sum -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    sum / probs.len().max(1) as f64
}

fn train_model(
    kind: ModelKind,
    scale: Scale,
    seed: u64,
    ov: &Overrides,
    train: &SplitSet,
) -> Result<TrainedModel, CliError> {
    ov.reject_unused(kind)?;
    let model = match kind {
        ModelKind::BaseRate => {
            TrainedModel::BaseRate(train_base_rate(&train.labels).map_err(model_error)?)
        }
        ModelKind::Ar1 => TrainedModel::Ar1(
            fit_ar1(&train.raw, &train.labels, &Ar1Config::default()).map_err(model_error)?,
        ),
        ModelKind::Logistic => {
            let mut cfg = LogisticConfig::default();
            if let Some(lr) = ov.learning_rate {
                cfg.learning_rate = lr;
            }
            if let Some(steps) = ov.steps {
                cfg.epochs = steps;
            }
            let (model, _) =
                train_logistic(&train.features, &train.labels, &cfg).map_err(model_error)?;
            TrainedModel::Logistic(model)
        }
        ModelKind::Gbt => {
            let mut cfg = match scale {
                Scale::Desk => GBTConfig::default(),
                Scale::Paper => GBTConfig::full_scale(),
            };
            cfg.seed = seed;
            if let Some(eta) = ov.learning_rate {
                cfg.eta = eta;
            }
            if let Some(trees) = ov.trees {
                cfg.n_trees = trees;
            }
            if let Some(depth) = ov.depth {
                cfg.max_depth = depth;
            }
            TrainedModel::Gbt(train_gbt(&train.features, &train.labels, &cfg).map_err(model_error)?)
        }
        ModelKind::Cnn => {
            let mut cfg = match scale {
                Scale::Desk => CnnConfig::default(),
                Scale::Paper => CnnConfig::full_scale(),
            };
            cfg.seed = seed;
            if let Some(steps) = ov.steps {
                cfg.steps = steps;
            }
            if let Some(batch) = ov.batch_size {
                cfg.batch_size = batch;
            }
            if let Some(lr) = ov.learning_rate {
                cfg.adam.learning_rate = lr;
            }
            if let Some(p) = ov.dropout {
                cfg.dropout_rate = p;
            }
            let (model, _) =
                train_cnn(&train.features, &train.labels, &cfg, None).map_err(model_error)?;
            TrainedModel::Cnn(model)
        }
        ModelKind::Lstm => {
            let mut cfg = match scale {
                Scale::Desk => LstmConfig::default(),
                Scale::Paper => LstmConfig::full_scale(),
            };
            cfg.seed = seed;
            if let Some(steps) = ov.steps {
                cfg.steps = steps;
            }
            if let Some(batch) = ov.batch_size {
                cfg.batch_size = batch;
            }
            if let Some(lr) = ov.learning_rate {
                cfg.rmsprop.learning_rate = lr;
            }
            if let Some(p) = ov.dropout {
                cfg.dropout_rate = p;
            }
            let (model, _) =
                train_lstm(&train.features, &train.labels, &cfg, None).map_err(model_error)?;
            TrainedModel::Lstm(model)
        }
    };
    Ok(model)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut file = ConfigFile::from_flag(args.config.as_deref())?;
    let kind = parse_kind(&resolve_required::<String>(args.model, &mut file, "model")?)?;
    let traces_path: PathBuf = resolve_required(args.traces, &mut file, "traces")?;
    let data_dir: PathBuf = resolve_required(args.data, &mut file, "data")?;
    let out: PathBuf = resolve_required(args.out, &mut file, "out")?;
    let scale = parse_scale(&resolve(args.scale, &mut file, "scale", "desk".to_string())?)?;
    let seed = resolve(args.seed, &mut file, "seed", 7)?;
    let overrides = Overrides {
        steps: resolve_opt(args.steps, &mut file, "steps")?,
        batch_size: resolve_opt(args.batch_size, &mut file, "batch-size")?,
        learning_rate: resolve_opt(args.learning_rate, &mut file, "learning-rate")?,
        trees: resolve_opt(args.trees, &mut file, "trees")?,
        depth: resolve_opt(args.depth, &mut file, "depth")?,
        dropout: resolve_opt(args.dropout, &mut file, "dropout")?,
    };
    file.finish()?;

    let (traces, cache) = load_prepared(&traces_path, &data_dir)?;
    let stats = validation(
        load_norm_stats(&data_dir.join(NORM_FILE)),
        "load normalization stats",
    )?;
    let examples = validation(
        assemble_examples(&traces, &cache, &stats),
        "assemble windows",
    )?;
    let [train, val, _test] = partition_examples(examples, &cache)?;
    if train.labels.is_empty() {
        return Err(CliError::Validation("training split is empty".into()));
    }

    let model = train_model(kind, scale, seed, &overrides, &train)?;
    let artifact = PredictorArtifact {
        seed,
        data_fingerprint: prepared_fingerprint(&data_dir)?,
        stats,
        model,
    };

    let train_scores = artifact.predict_batch(&train.raw).map_err(model_error)?;
    let loss = mean_log_loss(&train_scores, &train.labels);
    let val_scores = artifact.predict_batch(&val.raw).map_err(model_error)?;
    let val_set =
        validation(ScoredSet::new(val_scores, val.labels.clone()), "validation split")?;
    let (_, au_prc) = validation(pr_curve(&val_set), "validation PR curve")?;

    runtime(save_artifact(&artifact, &out), "write artifact")?;
    println!(
        "trained {} on {} examples (seed {seed}, scale {})",
        kind.as_str(),
        train.labels.len(),
        match scale {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    );
    // Full-precision floats so a reload can be checked for exact agreement.
    println!("final training loss: {loss}");
    println!("validation AU-PRC: {au_prc}");
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Args)]
pub struct EvaluateArgs {
    /// Input trace file.
    #[arg(long, value_name = "PATH")]
    traces: Option<PathBuf>,
    /// Prepared data directory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Artifacts to score, one or more.
    #[arg(long, value_name = "PATH", num_args = 1..)]
    artifacts: Vec<PathBuf>,
    /// Split to score: train, validation, or test.
    #[arg(long, value_name = "SPLIT")]
    split: Option<String>,
    /// Directory for per-artifact report JSON and curve CSVs.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Key-value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

fn artifact_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Scores one artifact over pre-extracted raw windows.
fn score_artifact(
    path: &Path,
    windows: &[Vec<f64>],
    labels: &[u8],
) -> Result<(PredictorArtifact, EvalReport), CliError> {
    let artifact = validation(load_artifact(path), &format!("load {}", path.display()))?;
    let scores = artifact.predict_batch(windows).map_err(model_error)?;
    let set = validation(ScoredSet::new(scores, labels.to_vec()), "score set")?;
    let report = validation(evaluate(&set), "evaluate")?;
    Ok((artifact, report))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let mut file = ConfigFile::from_flag(args.config.as_deref())?;
    let traces_path: PathBuf = resolve_required(args.traces, &mut file, "traces")?;
    let data_dir: PathBuf = resolve_required(args.data, &mut file, "data")?;
    let split = parse_split(&resolve(args.split, &mut file, "split", "test".to_string())?)?;
    let out_dir: Option<PathBuf> = resolve_opt(args.out_dir, &mut file, "out-dir")?;
    let artifacts = if args.artifacts.is_empty() {
        match file.take::<String>("artifacts")? {
            Some(list) => list.split(',').map(|s| PathBuf::from(s.trim())).collect(),
            None => Vec::new(),
        }
    } else {
        args.artifacts
    };
    file.finish()?;
    if artifacts.is_empty() {
        return Err(usage("at least one --artifacts path is required"));
    }

    let (traces, cache) = load_prepared(&traces_path, &data_dir)?;
    let (windows, labels) = validation(
        raw_windows_for_split(&traces, &cache, split, WINDOW_WIDTH),
        "extract windows",
    )?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    println!(
        "split: {} ({} examples, {} positive, prevalence {:.4}%)",
        split.as_str(),
        labels.len(),
        positives,
        100.0 * positives as f64 / labels.len().max(1) as f64
    );

    let mut rows = Vec::new();
    for path in &artifacts {
        let (artifact, report) = score_artifact(path, &windows, &labels)?;
        if let Some(dir) = &out_dir {
            runtime(std::fs::create_dir_all(dir), "create output directory")?;
            let stem = artifact_stem(path);
            runtime(
                std::fs::write(dir.join(format!("{stem}.eval.json")), report.to_json()),
                "write report",
            )?;
            let mut roc = Vec::new();
            let mut pr = Vec::new();
            runtime(report.write_roc_csv(&mut roc), "render ROC CSV")?;
            runtime(report.write_pr_csv(&mut pr), "render PR CSV")?;
            runtime(std::fs::write(dir.join(format!("{stem}.roc.csv")), roc), "write ROC CSV")?;
            runtime(std::fs::write(dir.join(format!("{stem}.pr.csv")), pr), "write PR CSV")?;
        }
        rows.push((artifact.kind(), report));
    }
    // Weakest first, like a leaderboard read bottom-up.
    rows.sort_by(|a, b| {
        a.1.au_prc
            .total_cmp(&b.1.au_prc)
            .then(a.1.au_roc.total_cmp(&b.1.au_roc))
            .then(a.0.as_str().cmp(b.0.as_str()))
    });
    println!("{:<24} {:>8} {:>8}", "model", "AU-ROC", "AU-PRC");
    for (kind, report) in &rows {
        println!(
            "{:<24} {:>8.4} {:>8.4}",
            kind.display_name(),
            report.au_roc,
            report.au_prc
        );
    }
    Ok(())
}

// ----------------------------------------------------------------- compare

#[derive(Args)]
pub struct CompareArgs {
    /// Input trace file.
    #[arg(long, value_name = "PATH")]
    traces: Option<PathBuf>,
    /// Prepared data directory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// First artifact (reported as first minus second).
    #[arg(long, value_name = "PATH")]
    first: Option<PathBuf>,
    /// Second artifact.
    #[arg(long, value_name = "PATH")]
    second: Option<PathBuf>,
    /// Metric to compare: pr or roc.
    #[arg(long, value_name = "METRIC")]
    metric: Option<String>,
    /// Number of bootstrap resamples.
    #[arg(long, value_name = "N")]
    resamples: Option<usize>,
    /// Resampling seed.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Split to score: train, validation, or test.
    #[arg(long, value_name = "SPLIT")]
    split: Option<String>,
    /// Key-value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let mut file = ConfigFile::from_flag(args.config.as_deref())?;
    let traces_path: PathBuf = resolve_required(args.traces, &mut file, "traces")?;
    let data_dir: PathBuf = resolve_required(args.data, &mut file, "data")?;
    let first: PathBuf = resolve_required(args.first, &mut file, "first")?;
    let second: PathBuf = resolve_required(args.second, &mut file, "second")?;
    let metric = match resolve(args.metric, &mut file, "metric", "pr".to_string())?.as_str() {
        "pr" => Metric::PrArea,
        "roc" => Metric::RocArea,
        other => return Err(usage(format!("--metric must be `pr` or `roc`, got `{other}`"))),
    };
    let resamples = resolve(args.resamples, &mut file, "resamples", 1000)?;
    let seed = resolve(args.seed, &mut file, "seed", 7)?;
    let split = parse_split(&resolve(args.split, &mut file, "split", "test".to_string())?)?;
    file.finish()?;

    let (traces, cache) = load_prepared(&traces_path, &data_dir)?;
    let (windows, labels) = validation(
        raw_windows_for_split(&traces, &cache, split, WINDOW_WIDTH),
        "extract windows",
    )?;
    let artifact_a = validation(load_artifact(&first), &format!("load {}", first.display()))?;
    let artifact_b = validation(load_artifact(&second), &format!("load {}", second.display()))?;
    let scores_a = artifact_a.predict_batch(&windows).map_err(model_error)?;
    let scores_b = artifact_b.predict_batch(&windows).map_err(model_error)?;

    let comparison = validation(
        bootstrap_compare(&scores_a, &scores_b, &labels, metric, resamples, seed),
        "bootstrap comparison",
    )?;
    let set_a = validation(ScoredSet::new(scores_a, labels.clone()), "first score set")?;
    let set_b = validation(ScoredSet::new(scores_b, labels.clone()), "second score set")?;
    let metric_of = |set: &ScoredSet| -> Result<f64, CliError> {
        Ok(match metric {
            Metric::PrArea => validation(pr_curve(set), "PR curve")?.1,
            Metric::RocArea => validation(roc_curve(set), "ROC curve")?.1,
        })
    };
    let (name_a, name_b) = (artifact_stem(&first), artifact_stem(&second));
    let metric_name = match metric {
        Metric::PrArea => "AU-PRC",
        Metric::RocArea => "AU-ROC",
    };
    println!(
        "comparing {name_a} vs {name_b} on {} ({} examples, {metric_name})",
        split.as_str(),
        labels.len()
    );
    println!("{name_a}: {}", metric_of(&set_a)?);
    println!("{name_b}: {}", metric_of(&set_b)?);
    println!("delta ({name_a} - {name_b}): {}", comparison.delta);
    println!(
        "p-value: {} (95% CI [{}, {}], {} resamples)",
        comparison.p_value, comparison.ci_low, comparison.ci_high, comparison.n_resamples
    );

    let (roc_a, _) = validation(roc_curve(&set_a), "first ROC curve")?;
    let (roc_b, _) = validation(roc_curve(&set_b), "second ROC curve")?;
    let ab = check_dominance(&roc_a, &roc_b);
    let ba = check_dominance(&roc_b, &roc_a);
    let verdict = match (ab.dominant, ba.dominant) {
        (true, true) => "ROC curves coincide".to_string(),
        (true, false) => format!("{name_a} dominates {name_b} at every operating point"),
        (false, true) => format!("{name_b} dominates {name_a} at every operating point"),
        (false, false) => format!(
            "ROC curves cross (each rises above the other by up to {:.4} / {:.4})",
            ba.max_violation, ab.max_violation
        ),
    };
    println!("{verdict}");
    Ok(())
}

// ----------------------------------------------------------------- explain

#[derive(Args)]
pub struct ExplainArgs {
    /// Artifact to explain (gbt, cnn, or lstm).
    #[arg(long, value_name = "PATH")]
    artifact: Option<PathBuf>,
    /// Input trace file.
    #[arg(long, value_name = "PATH")]
    traces: Option<PathBuf>,
    /// Prepared data directory (supplies background windows).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Case id to explain.
    #[arg(long, value_name = "ID")]
    case: Option<String>,
    /// Minute within the case.
    #[arg(long, value_name = "MIN")]
    minute: Option<usize>,
    /// Directory for the rendered CSV and SVG.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Background windows sampled from the training split.
    #[arg(long, value_name = "N")]
    background_size: Option<usize>,
    /// Background sampling seed.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Key-value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

fn cmd_explain(args: ExplainArgs) -> Result<(), CliError> {
    let mut file = ConfigFile::from_flag(args.config.as_deref())?;
    let artifact_path: PathBuf = resolve_required(args.artifact, &mut file, "artifact")?;
    let traces_path: PathBuf = resolve_required(args.traces, &mut file, "traces")?;
    let data_dir: PathBuf = resolve_required(args.data, &mut file, "data")?;
    let case: String = resolve_required(args.case, &mut file, "case")?;
    let minute = resolve_required(args.minute, &mut file, "minute")?;
    let out_dir: PathBuf = resolve_required(args.out_dir, &mut file, "out-dir")?;
    let background_size =
        resolve(args.background_size, &mut file, "background-size", DEFAULT_BACKGROUND)?;
    let seed = resolve(args.seed, &mut file, "seed", 7)?;
    file.finish()?;

    let artifact =
        validation(load_artifact(&artifact_path), &format!("load {}", artifact_path.display()))?;
    let (traces, cache) = load_prepared(&traces_path, &data_dir)?;
    let trace = traces
        .iter()
        .find(|t| t.case_id() == case)
        .ok_or_else(|| CliError::Validation(format!("case `{case}` not found in traces")))?;
    if minute >= trace.duration() {
        return Err(CliError::Validation(format!(
            "minute {minute} out of range: case `{case}` spans {} minutes",
            trace.duration()
        )));
    }

    let width = artifact.stats.width();
    let raw_window = extract_window(trace, minute, width);
    let (train_windows, _) = validation(
        raw_windows_for_split(&traces, &cache, Split::Train, width),
        "extract background windows",
    )?;
    let pool: Vec<Vec<f64>> = train_windows
        .iter()
        .map(|w| apply_normalization(w, &artifact.stats))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Validation(format!("normalize background: {e}")))?;
    let background = validation(
        BackgroundSet::sample(&pool, background_size, seed),
        "sample background",
    )?;

    let attribution = validation(
        explain_window(&artifact.model, &raw_window, &artifact.stats, &background),
        "attribute",
    )?;
    let risk = artifact.predict(&raw_window).map_err(model_error)?;

    runtime(std::fs::create_dir_all(&out_dir), "create output directory")?;
    let stem = out_dir.join(format!("case_{case}_t{minute}_{}", artifact.kind().as_str()));
    let (csv_path, svg_path) = runtime(
        oxiwarn::explain::render_explanation(&stem, &raw_window, &attribution, risk),
        "render explanation",
    )?;
    let method = match artifact.kind() {
        ModelKind::Gbt => "tree_shap",
        _ => "integrated_gradients",
    };
    println!("case {case} minute {minute}: risk {risk}");
    println!("method: {method} (attribution sums to the log-odds output)");
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}

// ------------------------------------------------------------------- serve

#[derive(Args)]
pub struct ServeArgs {
    /// Artifact to serve.
    #[arg(long, value_name = "PATH")]
    artifact: Option<PathBuf>,
    /// TCP endpoint, e.g. 127.0.0.1:7971; omit to serve stdin/stdout.
    #[arg(long, value_name = "ADDR")]
    listen: Option<String>,
    /// Attach top-3 per-minute attributions to every response.
    #[arg(long)]
    attrib: bool,
    /// Key-value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

fn cmd_serve(args: ServeArgs) -> Result<(), CliError> {
    let mut file = ConfigFile::from_flag(args.config.as_deref())?;
    let artifact_path: PathBuf = resolve_required(args.artifact, &mut file, "artifact")?;
    let listen: Option<String> = resolve_opt(args.listen, &mut file, "listen")?;
    let attrib = args.attrib || file.take::<bool>("attrib")?.unwrap_or(false);
    file.finish()?;

    let artifact =
        validation(load_artifact(&artifact_path), &format!("load {}", artifact_path.display()))?;
    let kind = artifact.kind();
    let engine = validation(InferenceEngine::new(artifact, attrib), "configure engine")?;

    match listen {
        None => {
            eprintln!(
                "serving {} on stdin/stdout (one JSON request per line; EOF ends the session)",
                kind.as_str()
            );
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            runtime(
                serve_stream(&engine, stdin.lock(), stdout.lock()),
                "serve stdio",
            )
        }
        Some(addr) => {
            let listener = runtime(
                std::net::TcpListener::bind(&addr),
                &format!("bind {addr}"),
            )?;
            let local = runtime(listener.local_addr(), "resolve bound address")?;
            eprintln!("serving {} on {local}", kind.as_str());
            // Runs until the process is terminated.
            let shutdown = Arc::new(AtomicBool::new(false));
            runtime(
                run_server(Arc::new(engine), listener, shutdown),
                "serve tcp",
            )
        }
    }
}
