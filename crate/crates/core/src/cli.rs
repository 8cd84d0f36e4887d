//! The `tripledml` command line: train, evaluate, gridsearch, gradcheck,
//! report, and fixtures subcommands.
//!
//! Exit codes partition the failure classes for scripting: 2 for
//! configuration errors, 3 for data errors, 4 for numeric failures.
//! All randomness flows from `--seed`/`--seeds`; rerunning any
//! subcommand with identical inputs reproduces its outputs.

use crate::data::{
    self,
    fixtures::{self, FixtureKind},
    Format, TextDataset,
};
use crate::diffcore::grad_check;
use crate::encoder::{
    load_checkpoint, save_checkpoint, Batch, CheckpointExtras, Vocabulary,
};
use crate::losses::{
    contrastive_loss, multinomial_cross_entropy, one_hot, proxy_nca_loss, soft_triple_loss,
    triple_entropy_loss, triplet_loss, ContrastiveParams, PairLabel, ProxyNcaParams,
    SoftTripleParams, TripleEntropyParams, TripletParams,
};
use crate::reporting::{
    self, compare, emit, load_report, EmitFormat, ReportMeta, RunReport, SizeBucket,
};
use crate::training::{
    derive_seed, run_grid, seed_stream, train_one, ExperimentPlan, GridConfigFile, GridOptions,
    GridPreset, HyperGrid, Objective, RunConfig, Schedule, SoftTripleHyper, TrainError,
    TrainSettings,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Environment variable that overrides `--out` when set.
pub const OUT_ENV_VAR: &str = "TRIPLEDML_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "tripledml",
    version,
    about = "Metric-learning losses and a cross-validated training harness for text classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write a checkpoint plus a run record.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Sweep hyperparameter configurations over seeds and folds.
    Gridsearch(GridsearchArgs),
    /// Check analytic gradients of every loss against finite differences.
    Gradcheck(GradcheckArgs),
    /// Aggregate or compare saved reports and emit them in other formats.
    Report(ReportArgs),
    /// Write the synthetic fixture corpora.
    Fixtures(FixturesArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossKind {
    Ce,
    Contrastive,
    Triplet,
    Proxynca,
    Softtriple,
    Tripleentropy,
}

impl LossKind {
    fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Contrastive => "contrastive",
            LossKind::Triplet => "triplet",
            LossKind::Proxynca => "proxynca",
            LossKind::Softtriple => "softtriple",
            LossKind::Tripleentropy => "tripleentropy",
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset file (csv, tsv, or jsonl).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<Format>,
    /// Training objective.
    #[arg(long, value_enum, default_value = "ce")]
    pub loss: LossKind,
    /// Mixing weight (tripleentropy only).
    #[arg(long)]
    pub beta: Option<f64>,
    /// Proxies per class (softtriple/tripleentropy only).
    #[arg(long)]
    pub k: Option<usize>,
    /// Entropy-regularizer scale (softtriple/tripleentropy only).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Outlier-robustness scale (softtriple/tripleentropy only).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Similarity margin (softtriple/tripleentropy only).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Dissimilar-pair margin (contrastive only).
    #[arg(long)]
    pub margin: Option<f64>,
    /// Triplet margin (triplet only).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Run seed; drives initialization, shuffling, and the holdout split.
    #[arg(long, default_value_t = 2)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Encoder embedding dimension.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Output directory (overridden by TRIPLEDML_OUT).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory holding model.json and vocab.txt from `train`.
    #[arg(long)]
    pub model_dir: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub format: Option<Format>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Output directory (overridden by TRIPLEDML_OUT); metrics print to
    /// stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GridsearchArgs {
    /// Key/value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<Format>,
    /// Objective family to sweep.
    #[arg(long, value_enum, default_value = "tripleentropy")]
    pub loss: LossKind,
    /// Named grid.
    #[arg(long)]
    pub grid_preset: Option<GridPreset>,
    /// Explicit grid lists, comma separated; each overrides the preset.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub gamma: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub delta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub beta: Option<Vec<f64>>,
    /// Training seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Parallel worker threads; results are identical for any value.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory (overridden by TRIPLEDML_OUT).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue an interrupted search from its runs.jsonl.
    #[arg(long, default_value_t = false)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random instances per loss.
    #[arg(long, default_value_t = 50)]
    pub draws: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report to render (json emitted by gridsearch/train).
    #[arg(long)]
    pub input: PathBuf,
    /// Baseline report; when given, a gain comparison is produced.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Formats to emit.
    #[arg(long, value_delimiter = ',', default_values = ["json", "csv", "markdown"])]
    pub emit: Vec<String>,
    /// Output directory (overridden by TRIPLEDML_OUT).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FixturesArgs {
    /// Output directory (overridden by TRIPLEDML_OUT).
    #[arg(long, default_value = "fixtures")]
    pub out: PathBuf,
    /// Records per corpus.
    #[arg(long, default_value_t = 4000)]
    pub n: usize,
    /// Generation seed, recorded in the manifest.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Failure classes, mapped to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanLoss { .. }
            | TrainError::NonFiniteGradient { .. }
            | TrainError::Diff(_)
            | TrainError::Loss(_) => CliError::Numeric(e.to_string()),
            TrainError::Data(inner) => CliError::Data(inner.to_string()),
            TrainError::InvalidPlan(_) | TrainError::StepOutOfRange { .. } => {
                CliError::Config(e.to_string())
            }
            TrainError::Sink { .. } | TrainError::OverlappingSplits(_) => {
                CliError::Data(e.to_string())
            }
            TrainError::Encoder(inner) => CliError::Data(inner.to_string()),
        }
    }
}

impl From<reporting::ReportError> for CliError {
    fn from(e: reporting::ReportError) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// TRIPLEDML_OUT takes precedence over any `--out` flag.
fn resolve_out(flag: Option<&Path>, default: &str) -> PathBuf {
    if let Ok(env) = std::env::var(OUT_ENV_VAR) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    flag.map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(default))
}

fn resolve_format(path: &Path, flag: Option<Format>) -> Result<Format> {
    match flag.or_else(|| Format::from_extension(path)) {
        Some(f) => Ok(f),
        None => Err(CliError::Config(format!(
            "cannot infer format of {}; pass --format",
            path.display()
        ))),
    }
}

/// Loss-specific flags are only accepted for the loss that owns them.
fn check_loss_flags(args: &TrainArgs) -> Result<()> {
    let reject = |flag: &str, owners: &str| {
        Err(CliError::Config(format!(
            "--{flag} only applies to {owners} (got --loss {})",
            args.loss.name()
        )))
    };
    let soft_triple_family = matches!(args.loss, LossKind::Softtriple | LossKind::Tripleentropy);
    if args.beta.is_some() && args.loss != LossKind::Tripleentropy {
        return reject("beta", "tripleentropy");
    }
    if !soft_triple_family {
        if args.k.is_some() {
            return reject("k", "softtriple or tripleentropy");
        }
        if args.gamma.is_some() {
            return reject("gamma", "softtriple or tripleentropy");
        }
        if args.lambda.is_some() {
            return reject("lambda", "softtriple or tripleentropy");
        }
        if args.delta.is_some() {
            return reject("delta", "softtriple or tripleentropy");
        }
    }
    if args.margin.is_some() && args.loss != LossKind::Contrastive {
        return reject("margin", "contrastive");
    }
    if args.alpha.is_some() && args.loss != LossKind::Triplet {
        return reject("alpha", "triplet");
    }
    Ok(())
}

fn objective_from_args(args: &TrainArgs) -> Result<Objective> {
    check_loss_flags(args)?;
    let hyper = SoftTripleHyper {
        k: args.k.unwrap_or(2),
        gamma: args.gamma.unwrap_or(0.1),
        lambda: args.lambda.unwrap_or(3.0),
        delta: args.delta.unwrap_or(0.1),
        beta: args.beta.unwrap_or(0.5),
    };
    Ok(match args.loss {
        LossKind::Ce => Objective::Ce,
        LossKind::Contrastive => Objective::Contrastive {
            margin: args.margin.unwrap_or(1.0),
        },
        LossKind::Triplet => Objective::Triplet {
            alpha: args.alpha.unwrap_or(0.5),
        },
        LossKind::Proxynca => Objective::ProxyNca,
        LossKind::Softtriple => Objective::SoftTriple(hyper),
        LossKind::Tripleentropy => Objective::TripleEntropy(hyper),
    })
}

/// The run record `train` writes; wall time is deliberately excluded so
/// identical inputs produce identical bytes.
#[derive(Serialize)]
struct TrainMetrics {
    config: String,
    seed: u64,
    dataset: String,
    val_accuracy: f64,
    epochs_trained: usize,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let format = resolve_format(&args.dataset, args.format)?;
    let ds = data::load_dataset(&args.dataset, format)?;
    let objective = objective_from_args(args)?;

    let out_dir = resolve_out(Some(&args.out), "out");
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;

    // Hold out fold 0 of a seeded stratified 5-fold split.
    let split = data::stratified_kfold(&ds, 5, derive_seed(args.seed, seed_stream::FOLD_SPLIT))?;
    let fold = &split.folds[0];

    let config = RunConfig {
        objective: objective.clone(),
        settings: TrainSettings {
            lr: args.lr,
            weight_decay: args.weight_decay,
            dim: args.dim,
            early_stop_patience: 3,
        },
        batch_size: args.batch_size,
        epochs: args.epochs,
    };
    let outcome = train_one(&config, args.seed, &fold.train, &fold.validation, &ds)?;

    let extras = CheckpointExtras {
        class_names: ds.class_names.clone(),
        objective: objective.to_string(),
        prototypes: outcome.prototypes,
    };
    save_checkpoint(&outcome.model, &extras, &out_dir.join("model.json"))
        .map_err(|e| CliError::Data(e.to_string()))?;
    outcome
        .vocab
        .save(&out_dir.join("vocab.txt"))
        .map_err(|e| CliError::Data(e.to_string()))?;

    let metrics = TrainMetrics {
        config: objective.to_string(),
        seed: args.seed,
        dataset: ds.provenance.source.clone(),
        val_accuracy: outcome.val_accuracy,
        epochs_trained: outcome.epochs_trained,
    };
    let body = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
    std::fs::write(out_dir.join("metrics.json"), &body)
        .map_err(|e| CliError::Data(format!("cannot write metrics: {e}")))?;
    println!(
        "trained {} on {} (seed {}): accuracy {:.4} after {} epochs",
        metrics.config, metrics.dataset, args.seed, metrics.val_accuracy, metrics.epochs_trained
    );
    println!("checkpoint: {}", out_dir.join("model.json").display());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (model, extras) = load_checkpoint(&args.model_dir.join("model.json"))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let vocab = Vocabulary::load(&args.model_dir.join("vocab.txt"))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let format = resolve_format(&args.dataset, args.format)?;
    let ds = data::load_dataset_with_classes(&args.dataset, format, &extras.class_names)?;

    let correct: usize = {
        let mut correct = 0;
        for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(args.batch_size) {
            let records: Vec<_> = chunk.iter().map(|&i| &ds.records[i]).collect();
            let batch = Batch::from_records(&records, &vocab);
            let predictions = classify_with_checkpoint(&model, &extras, &batch)?;
            correct += predictions
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
        }
        correct
    };
    let accuracy = correct as f64 / ds.len() as f64;
    println!(
        "{} on {}: accuracy {:.4} ({}/{} correct)",
        extras.objective,
        ds.provenance.source,
        accuracy,
        correct,
        ds.len()
    );
    if let Some(out) = &args.out {
        let out_dir = resolve_out(Some(out), "out");
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
        let body = serde_json::json!({
            "objective": extras.objective,
            "dataset": ds.provenance.source,
            "accuracy": accuracy,
            "n": ds.len(),
        });
        std::fs::write(
            out_dir.join("evaluation.json"),
            serde_json::to_string_pretty(&body).expect("json") + "\n",
        )
        .map_err(|e| CliError::Data(format!("cannot write evaluation: {e}")))?;
    }
    Ok(())
}

/// Decision rules for checkpoint evaluation, mirroring training-time
/// evaluation per objective.
fn classify_with_checkpoint(
    model: &crate::encoder::EncoderModel,
    extras: &CheckpointExtras,
    batch: &Batch,
) -> Result<Vec<usize>> {
    let tape = crate::diffcore::Tape::new();
    let enc = model
        .encode(batch, &tape)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let classes = model.num_classes;
    let d = model.dim;
    let pooled = enc.pooled.data();
    let probs = enc.probs.data();

    let argmax = |row: &[f64]| -> usize {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    };
    let head_based = extras.objective.starts_with("ce")
        || extras.objective.starts_with("tripleentropy");
    let mut out = Vec::with_capacity(batch.rows());
    for r in 0..batch.rows() {
        if head_based {
            out.push(argmax(&probs[r * classes..(r + 1) * classes]));
            continue;
        }
        let prototypes = extras.prototypes.as_ref().ok_or_else(|| {
            CliError::Data(format!(
                "checkpoint for {} lacks the prototype block its evaluation needs",
                extras.objective
            ))
        })?;
        let e = &pooled[r * d..(r + 1) * d];
        let scores: Vec<f64> = if extras.objective.starts_with("softtriple") {
            let k = prototypes.shape[1];
            let gamma = 0.1; // evaluation temperature; ranking is insensitive at small k
            (0..classes)
                .map(|c| {
                    let block = &prototypes.data[c * k * d..(c + 1) * k * d];
                    let dots: Vec<f64> = (0..k)
                        .map(|p| (0..d).map(|j| block[p * d + j] * e[j]).sum())
                        .collect();
                    let max = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let ws: Vec<f64> = dots.iter().map(|&x| ((x - max) / gamma).exp()).collect();
                    let z: f64 = ws.iter().sum();
                    dots.iter().zip(&ws).map(|(&x, &w)| x * w / z).sum()
                })
                .collect()
        } else if extras.objective.starts_with("proxynca") {
            let norm = |v: &[f64]| -> Vec<f64> {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n == 0.0 {
                    v.to_vec()
                } else {
                    v.iter().map(|x| x / n).collect()
                }
            };
            let eh = norm(e);
            (0..classes)
                .map(|c| {
                    let p = norm(&prototypes.data[c * d..(c + 1) * d]);
                    -eh.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
                .collect()
        } else {
            // contrastive/triplet: nearest stored centroid
            (0..classes)
                .map(|c| {
                    let p = &prototypes.data[c * d..(c + 1) * d];
                    -e.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
                .collect()
        };
        out.push(argmax(&scores));
    }
    Ok(out)
}

fn cmd_gridsearch(args: &GridsearchArgs) -> Result<()> {
    let file_cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            GridConfigFile::parse(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => GridConfigFile::default(),
    };

    let dataset_path = args
        .dataset
        .clone()
        .or_else(|| file_cfg.dataset.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::Config("no dataset given (flag or config file)".to_string()))?;
    let format = match (&args.format, &file_cfg.format) {
        (Some(f), _) => Some(*f),
        (None, Some(name)) => Some(
            name.parse::<Format>()
                .map_err(|e| CliError::Config(e.to_string()))?,
        ),
        (None, None) => None,
    };
    let format = resolve_format(&dataset_path, format)?;
    let ds = data::load_dataset(&dataset_path, format)?;

    // Flags override the config file list-by-list, which overrides the preset.
    let mut grid_file = file_cfg.clone();
    if let Some(preset) = args.grid_preset {
        grid_file.preset = Some(match preset {
            GridPreset::PaperFull => "paper-full".to_string(),
            GridPreset::DeskSmall => "desk-small".to_string(),
        });
    }
    if args.k.is_some() {
        grid_file.k = args.k.clone();
    }
    if args.gamma.is_some() {
        grid_file.gamma = args.gamma.clone();
    }
    if args.lambda.is_some() {
        grid_file.lambda = args.lambda.clone();
    }
    if args.delta.is_some() {
        grid_file.delta = args.delta.clone();
    }
    if args.beta.is_some() {
        grid_file.beta = args.beta.clone();
    }
    let grid: HyperGrid = grid_file.grid().map_err(|e| CliError::Config(e.to_string()))?;

    let objectives = match args.loss {
        LossKind::Tripleentropy => grid
            .configs()
            .into_iter()
            .map(Objective::TripleEntropy)
            .collect(),
        LossKind::Ce => vec![Objective::Ce],
        other => {
            return Err(CliError::Config(format!(
                "gridsearch sweeps tripleentropy (or a ce baseline); got --loss {}",
                other.name()
            )))
        }
    };

    let mut plan = ExperimentPlan::new(objectives);
    if let Some(seeds) = args.seeds.clone().or(file_cfg.seeds) {
        plan.seeds = seeds;
    }
    if let Some(folds) = args.folds.or(file_cfg.folds) {
        plan.fold_count = folds;
    }
    if let Some(epochs) = args.epochs.or(file_cfg.epochs) {
        plan.epochs = epochs;
    }
    if let Some(batch) = args.batch_size.or(file_cfg.batch_size) {
        plan.batch_size = batch;
    }
    if let Some(lr) = args.lr.or(file_cfg.lr) {
        plan.settings.lr = lr;
    }
    if let Some(wd) = args.weight_decay.or(file_cfg.weight_decay) {
        plan.settings.weight_decay = wd;
    }
    if let Some(dim) = args.dim.or(file_cfg.dim) {
        plan.settings.dim = dim;
    }
    let jobs = args.jobs.or(file_cfg.jobs).unwrap_or(1);

    let out_dir = resolve_out(
        args.out
            .clone()
            .or_else(|| file_cfg.out.as_ref().map(PathBuf::from))
            .as_deref(),
        "out",
    );
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;

    let opts = GridOptions {
        jobs,
        sink_path: Some(out_dir.join("runs.jsonl")),
        resume: args.resume,
    };
    let report = run_grid(&plan, &ds, &opts)?;
    emit(&report, EmitFormat::Json, &out_dir.join("report.json"))?;

    if let Some(best) = report.best_aggregate() {
        println!(
            "best config: {} with mean accuracy {:.4} over {} runs",
            best.config, best.mean, best.n
        );
    }
    println!("records: {}", out_dir.join("runs.jsonl").display());
    println!("report:  {}", out_dir.join("report.json").display());
    Ok(())
}

/// Seeded random instances of each loss, checked against central
/// differences. Returns `(loss name, max relative error)` rows.
pub fn gradcheck_table(draws: usize, step: f64, seed: u64) -> Result<Vec<(String, f64)>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numeric = |e: crate::diffcore::DiffError| CliError::Numeric(e.to_string());

    let mut rows: Vec<(String, f64)> = Vec::new();

    // Each entry perturbs every real input of the loss (embeddings and
    // proxies together) through one packed leaf vector.
    let (m, c, k, d) = (3usize, 2usize, 2usize, 3usize);

    let mut worst = 0.0f64;
    for _ in 0..draws {
        let x: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let err = grad_check(
            |leaf| {
                let flat = leaf.reshape(&[2 * d, 1])?;
                let a = flat.gather_rows(&(0..d).collect::<Vec<_>>())?.reshape(&[d])?;
                let b = flat.gather_rows(&(d..2 * d).collect::<Vec<_>>())?.reshape(&[d])?;
                let params = ContrastiveParams::new(3.0)
                    .map_err(|e| crate::diffcore::DiffError::InvalidArgument(e.to_string()))?;
                contrastive_loss(&a, &b, PairLabel::Dissimilar, &params)
                    .map_err(|e| crate::diffcore::DiffError::InvalidArgument(e.to_string()))
            },
            &x,
            &[2 * d],
            step,
        )
        .map_err(numeric)?;
        worst = worst.max(err);
    }
    rows.push(("contrastive".to_string(), worst));

    let mut worst = 0.0f64;
    for _ in 0..draws {
        let x: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let err = grad_check(
            |leaf| {
                let flat = leaf.reshape(&[3 * d, 1])?;
                let a = flat.gather_rows(&(0..d).collect::<Vec<_>>())?.reshape(&[d])?;
                let p = flat.gather_rows(&(d..2 * d).collect::<Vec<_>>())?.reshape(&[d])?;
                let n = flat
                    .gather_rows(&(2 * d..3 * d).collect::<Vec<_>>())?
                    .reshape(&[d])?;
                let params = TripletParams::new(4.0)
                    .map_err(|e| crate::diffcore::DiffError::InvalidArgument(e.to_string()))?;
                triplet_loss(&a, &p, &n, &params)
                    .map_err(|e| crate::diffcore::DiffError::InvalidArgument(e.to_string()))
            },
            &x,
            &[3 * d],
            step,
        )
        .map_err(numeric)?;
        worst = worst.max(err);
    }
    rows.push(("triplet".to_string(), worst));

    let mut worst = 0.0f64;
    for _ in 0..draws {
        // example + one proxy per class, all perturbed
        let x: Vec<f64> = (0..(c + 1) * d)
            .map(|_| rng.random_range(0.2..2.0)) // bounded away from zero norm
            .collect();
        let err = grad_check(
            |leaf| {
                let flat = leaf.reshape(&[(c + 1) * d, 1])?;
                let e = flat.gather_rows(&(0..d).collect::<Vec<_>>())?.reshape(&[d])?;
                let z = flat
                    .gather_rows(&(d..(c + 1) * d).collect::<Vec<_>>())?
                    .reshape(&[c, d])?;
                let params = ProxyNcaParams::new(z)
                    .map_err(|e| crate::diffcore::DiffError::InvalidArgument(e.to_string()))?;
                proxy_nca_loss(&e, 0, &params)
                    .map_err(|e| crate::diffcore::DiffError::InvalidArgument(e.to_string()))
            },
            &x,
            &[(c + 1) * d],
            step,
        )
        .map_err(numeric)?;
        worst = worst.max(err);
    }
    rows.push(("proxynca".to_string(), worst));

    let mut worst = 0.0f64;
    for draw in 0..draws {
        let x: Vec<f64> = (0..m * d + c * k * d)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        let labels = [draw % c, (draw + 1) % c, 0];
        let err = grad_check(
            |leaf| {
                let flat = leaf.reshape(&[m * d + c * k * d, 1])?;
                let e = flat
                    .gather_rows(&(0..m * d).collect::<Vec<_>>())?
                    .reshape(&[m, d])?;
                let w = flat
                    .gather_rows(&(m * d..m * d + c * k * d).collect::<Vec<_>>())?
                    .reshape(&[c, k, d])?;
                let params = SoftTripleParams::new(w, 0.2, 3.3, 0.1)
                    .map_err(|e| crate::diffcore::DiffError::InvalidArgument(e.to_string()))?;
                soft_triple_loss(&e, &labels, &params)
                    .map_err(|e| crate::diffcore::DiffError::InvalidArgument(e.to_string()))
            },
            &x,
            &[m * d + c * k * d],
            step,
        )
        .map_err(numeric)?;
        worst = worst.max(err);
    }
    rows.push(("softtriple".to_string(), worst));

    let mut worst = 0.0f64;
    for _ in 0..draws {
        let x: Vec<f64> = (0..m * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..m).map(|i| i % c).collect();
        let err = grad_check(
            |leaf| {
                let logits = leaf.reshape(&[m, c])?;
                let probs = logits.softmax()?;
                let targets = one_hot(logits.tape(), &labels, c)
                    .map_err(|e| crate::diffcore::DiffError::InvalidArgument(e.to_string()))?;
                multinomial_cross_entropy(&probs, &targets)
                    .map_err(|e| crate::diffcore::DiffError::InvalidArgument(e.to_string()))
            },
            &x,
            &[m * c],
            step,
        )
        .map_err(numeric)?;
        worst = worst.max(err);
    }
    rows.push(("cross-entropy".to_string(), worst));

    let mut worst = 0.0f64;
    for draw in 0..draws {
        let total = m * c + m * d + c * k * d;
        let x: Vec<f64> = (0..total).map(|_| rng.random_range(-1.5..1.5)).collect();
        let labels: Vec<usize> = (0..m).map(|i| i % c).collect();
        let beta = [0.1, 0.3, 0.5, 0.7, 0.9][draw % 5];
        let err = grad_check(
            |leaf| {
                let flat = leaf.reshape(&[total, 1])?;
                let logits = flat
                    .gather_rows(&(0..m * c).collect::<Vec<_>>())?
                    .reshape(&[m, c])?;
                let probs = logits.softmax()?;
                let e = flat
                    .gather_rows(&(m * c..m * c + m * d).collect::<Vec<_>>())?
                    .reshape(&[m, d])?;
                let w = flat
                    .gather_rows(&(m * c + m * d..total).collect::<Vec<_>>())?
                    .reshape(&[c, k, d])?;
                let wrap = |e: crate::losses::LossError| {
                    crate::diffcore::DiffError::InvalidArgument(e.to_string())
                };
                let st = SoftTripleParams::new(w, 0.2, 3.3, 0.1).map_err(wrap)?;
                let params = TripleEntropyParams::new(beta, st).map_err(wrap)?;
                let targets = one_hot(logits.tape(), &labels, c).map_err(wrap)?;
                triple_entropy_loss(&probs, &targets, &e, &labels, &params).map_err(wrap)
            },
            &x,
            &[total],
            step,
        )
        .map_err(numeric)?;
        worst = worst.max(err);
    }
    rows.push(("tripleentropy".to_string(), worst));

    Ok(rows)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let rows = gradcheck_table(args.draws, args.step, args.seed)?;
    let mut failed = false;
    println!("{:<14} {:>14}  result", "loss", "max rel err");
    for (name, err) in &rows {
        let pass = *err < args.tolerance;
        failed |= !pass;
        println!(
            "{:<14} {:>14.3e}  {}",
            name,
            err,
            if pass { "pass" } else { "FAIL" }
        );
    }
    if failed {
        return Err(CliError::Numeric(format!(
            "a loss exceeded the {} gradient tolerance",
            args.tolerance
        )));
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let report = load_report(&args.input)?;
    let out_dir = resolve_out(Some(&args.out), "out");
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;

    let formats: Vec<EmitFormat> = args
        .emit
        .iter()
        .map(|name| name.parse::<EmitFormat>().map_err(CliError::Config))
        .collect::<Result<_>>()?;

    match &args.baseline {
        Some(baseline_path) => {
            let baseline = load_report(baseline_path)?;
            let table = compare(&baseline, &report)?;
            for format in formats {
                match format {
                    EmitFormat::Json => {
                        let body =
                            serde_json::to_string_pretty(&table).expect("gain table serializes")
                                + "\n";
                        std::fs::write(out_dir.join("gains.json"), body)
                            .map_err(|e| CliError::Data(e.to_string()))?;
                    }
                    EmitFormat::Csv => {
                        let mut body =
                            String::from("dataset,size_bucket,baseline_pct,candidate_pct,gain_pp\n");
                        for row in &table.rows {
                            body.push_str(&format!(
                                "{},{},{},{},{}\n",
                                row.dataset,
                                row.size_bucket,
                                row.baseline_pct,
                                row.candidate_pct,
                                row.gain_pp
                            ));
                        }
                        std::fs::write(out_dir.join("gains.csv"), body)
                            .map_err(|e| CliError::Data(e.to_string()))?;
                    }
                    EmitFormat::Markdown => {
                        let body =
                            reporting::render_gains_markdown(&table, "baseline", "candidate");
                        std::fs::write(out_dir.join("gains.md"), body)
                            .map_err(|e| CliError::Data(e.to_string()))?;
                    }
                }
            }
            for row in &table.rows {
                println!("{}: {:+.2} pp", row.dataset, row.gain_pp);
            }
        }
        None => {
            for format in formats {
                let name = match format {
                    EmitFormat::Json => "report.json",
                    EmitFormat::Csv => "report.csv",
                    EmitFormat::Markdown => "report.md",
                };
                emit(&report, format, &out_dir.join(name))?;
            }
            println!("emitted {} format(s) to {}", args.emit.len(), out_dir.display());
        }
    }
    Ok(())
}

fn cmd_fixtures(args: &FixturesArgs) -> Result<()> {
    let out_dir = resolve_out(Some(&args.out), "fixtures");
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut manifest = Vec::new();
    for kind in [FixtureKind::Sentiment2, FixtureKind::Topics6] {
        let ds = fixtures::generate(kind, args.n, args.seed);
        let file = out_dir.join(format!("{kind}.csv"));
        data::save_dataset(&ds, &file, Format::Csv)?;
        println!("wrote {} ({} records)", file.display(), ds.len());
        manifest.push(serde_json::json!({
            "file": format!("{kind}.csv"),
            "kind": kind.to_string(),
            "records": ds.len(),
            "classes": ds.num_classes(),
            "seed": args.seed,
            "provenance": ds.provenance.source,
        }));
    }
    let manifest = serde_json::json!({ "fixtures": manifest });
    std::fs::write(
        out_dir.join("fixtures.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest") + "\n",
    )
    .map_err(|e| CliError::Data(format!("cannot write manifest: {e}")))?;
    Ok(())
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Gridsearch(args) => cmd_gridsearch(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Report(args) => cmd_report(args),
        Command::Fixtures(args) => cmd_fixtures(args),
    }
}

// Format/GridPreset need FromStr-based clap parsing.
impl clap::builder::ValueParserFactory for Format {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Format>().map_err(|e| e.to_string()))
    }
}

impl clap::builder::ValueParserFactory for GridPreset {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<GridPreset>())
    }
}

/// Helpers shared with the acceptance suite.
pub mod protocol {
    use super::*;

    /// Metadata for a report built outside `run_grid`.
    pub fn meta_for(ds: &TextDataset, plan: &ExperimentPlan) -> ReportMeta {
        ReportMeta {
            dataset: ds.provenance.source.clone(),
            sampling: ds.provenance.sampling.clone(),
            dataset_size: ds.len(),
            size_bucket: SizeBucket::for_size(ds.len()),
            seeds: plan.seeds.clone(),
            fold_count: plan.fold_count,
            batch_size: plan.batch_size,
            epochs: plan.epochs,
        }
    }

    /// The warmup peak step of a schedule, exposed for protocol checks.
    pub fn warmup_peak(total_steps: usize) -> usize {
        Schedule::new(total_steps, 1e-5).warmup_steps()
    }

    /// Baseline-vs-candidate gain on one dataset from two finished
    /// reports.
    pub fn gain_pp(baseline: &RunReport, candidate: &RunReport) -> Result<f64> {
        Ok(compare(baseline, candidate)?.rows[0].gain_pp)
    }
}
