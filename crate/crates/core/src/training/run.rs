//! Single training runs and the grid-search driver.

use super::optimizer::{lr_at, optimizer_step, AdamWConfig, OptimizerState, Schedule};
use super::plan::{ExperimentPlan, Objective, RunConfig};
use super::{derive_seed, seed_stream, TrainError};
use crate::data::{shuffle, stratified_kfold, TextDataset};
use crate::diffcore::{Tape, Tensor};
use crate::encoder::{
    normal_draws, token_views_for_dml, Batch, EncoderModel, Parameter, Vocabulary,
};
use crate::losses::{
    contrastive_loss, multinomial_cross_entropy, one_hot, proxy_nca_loss, soft_triple_loss,
    triple_entropy_loss, triplet_loss, ContrastiveParams, PairLabel, ProxyNcaParams,
    SoftTripleParams, TripleEntropyParams, TripletParams,
};
use crate::reporting::{ReportMeta, RunRecord, RunReport, SizeBucket};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

/// What one training run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Best validation accuracy seen across epochs.
    pub val_accuracy: f64,
    pub epochs_trained: usize,
    /// Per-step training loss values, for trajectory comparisons.
    pub loss_trace: Vec<f64>,
    pub model: EncoderModel,
    pub vocab: Vocabulary,
    /// Proxies (or train-fold class centroids) for embedding-space
    /// evaluation of the metric-learning objectives.
    pub prototypes: Option<Parameter>,
}

fn proxies_for(objective: &Objective, classes: usize, dim: usize, seed: u64) -> Option<Parameter> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_stream::PROXY_INIT));
    let scale = 1.0 / (dim as f64).sqrt();
    match objective {
        Objective::TripleEntropy(h) | Objective::SoftTriple(h) => Some(Parameter {
            name: "proxies".to_string(),
            shape: vec![classes, h.k, dim],
            data: normal_draws(&mut rng, classes * h.k * dim, scale),
        }),
        Objective::ProxyNca => Some(Parameter {
            name: "proxies".to_string(),
            shape: vec![classes, dim],
            data: normal_draws(&mut rng, classes * dim, scale),
        }),
        _ => None,
    }
}

/// Pooled embeddings of some records under the current model, row per
/// record, computed without recording gradients.
fn pooled_embeddings(
    model: &EncoderModel,
    vocab: &Vocabulary,
    ds: &TextDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size) {
        let records: Vec<_> = chunk.iter().map(|&i| &ds.records[i]).collect();
        let batch = Batch::from_records(&records, vocab);
        let tape = Tape::new();
        let enc = model.encode(&batch, &tape)?;
        let data = enc.pooled.data();
        for row in 0..batch.rows() {
            out.push(data[row * model.dim..(row + 1) * model.dim].to_vec());
        }
    }
    Ok(out)
}

/// How a trained model turns an embedding or probability row into a class.
enum EvalRule {
    HeadArgmax,
    /// argmax_c of the relaxed proxy similarity, `[C, k, d]` proxies.
    SoftTripleSimilarity { gamma: f64 },
    /// Nearest normalized proxy, `[C, d]` proxies.
    NearestNormalizedProxy,
    /// Nearest class centroid, `[C, d]` centroids.
    NearestCentroid,
}

impl EvalRule {
    fn for_objective(objective: &Objective) -> EvalRule {
        match objective {
            Objective::Ce | Objective::TripleEntropy(_) => EvalRule::HeadArgmax,
            Objective::SoftTriple(h) => EvalRule::SoftTripleSimilarity { gamma: h.gamma },
            Objective::ProxyNca => EvalRule::NearestNormalizedProxy,
            Objective::Contrastive { .. } | Objective::Triplet { .. } => EvalRule::NearestCentroid,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Plain-f64 relaxed similarity, shared by the evaluation path.
fn relaxed_similarity(e: &[f64], class_proxies: &[f64], k: usize, d: usize, gamma: f64) -> f64 {
    let dots: Vec<f64> = (0..k)
        .map(|p| (0..d).map(|j| class_proxies[p * d + j] * e[j]).sum())
        .collect();
    let max = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = dots.iter().map(|&x| ((x - max) / gamma).exp()).collect();
    let z: f64 = weights.iter().sum();
    dots.iter().zip(&weights).map(|(&x, &w)| x * w / z).sum()
}

struct Evaluator<'a> {
    rule: EvalRule,
    prototypes: Option<&'a Parameter>,
}

impl Evaluator<'_> {
    fn classify_batch(
        &self,
        model: &EncoderModel,
        batch: &Batch,
        tape: &Tape,
    ) -> Result<Vec<usize>, TrainError> {
        let enc = model.encode(batch, tape)?;
        let classes = model.num_classes;
        let d = model.dim;
        let predictions = match &self.rule {
            EvalRule::HeadArgmax => {
                let probs = enc.probs.data();
                (0..batch.rows())
                    .map(|r| argmax(&probs[r * classes..(r + 1) * classes]))
                    .collect()
            }
            EvalRule::SoftTripleSimilarity { gamma } => {
                let proxies = self.prototypes.expect("softtriple eval needs proxies");
                let k = proxies.shape[1];
                let pooled = enc.pooled.data();
                (0..batch.rows())
                    .map(|r| {
                        let e = &pooled[r * d..(r + 1) * d];
                        let scores: Vec<f64> = (0..classes)
                            .map(|c| {
                                relaxed_similarity(
                                    e,
                                    &proxies.data[c * k * d..(c + 1) * k * d],
                                    k,
                                    d,
                                    *gamma,
                                )
                            })
                            .collect();
                        argmax(&scores)
                    })
                    .collect()
            }
            EvalRule::NearestNormalizedProxy => {
                let proxies = self.prototypes.expect("proxynca eval needs proxies");
                let pooled = enc.pooled.data();
                (0..batch.rows())
                    .map(|r| {
                        let e = normalized(&pooled[r * d..(r + 1) * d]);
                        let scores: Vec<f64> = (0..classes)
                            .map(|c| -sqdist(&e, &normalized(&proxies.data[c * d..(c + 1) * d])))
                            .collect();
                        argmax(&scores)
                    })
                    .collect()
            }
            EvalRule::NearestCentroid => {
                let centroids = self.prototypes.expect("centroid eval needs centroids");
                let pooled = enc.pooled.data();
                (0..batch.rows())
                    .map(|r| {
                        let e = &pooled[r * d..(r + 1) * d];
                        let scores: Vec<f64> = (0..classes)
                            .map(|c| -sqdist(e, &centroids.data[c * d..(c + 1) * d]))
                            .collect();
                        argmax(&scores)
                    })
                    .collect()
            }
        };
        Ok(predictions)
    }
}

/// Mean per-class pooled embedding over the given records.
fn class_centroids(
    model: &EncoderModel,
    vocab: &Vocabulary,
    ds: &TextDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Parameter, TrainError> {
    let classes = ds.num_classes();
    let d = model.dim;
    let pooled = pooled_embeddings(model, vocab, ds, indices, batch_size)?;
    let mut sums = vec![0.0; classes * d];
    let mut counts = vec![0usize; classes];
    for (row, &i) in indices.iter().enumerate() {
        let label = ds.records[i].label;
        counts[label] += 1;
        for j in 0..d {
            sums[label * d + j] += pooled[row][j];
        }
    }
    for c in 0..classes {
        if counts[c] > 0 {
            for j in 0..d {
                sums[c * d + j] /= counts[c] as f64;
            }
        }
    }
    Ok(Parameter {
        name: "centroids".to_string(),
        shape: vec![classes, d],
        data: sums,
    })
}

/// Gradient slots in model-parameter order, proxies last when present.
type GradSlots = Vec<Option<Vec<f64>>>;

/// Build this batch's loss for the configured objective.
#[allow(clippy::too_many_arguments)]
fn batch_loss(
    objective: &Objective,
    model: &EncoderModel,
    batch: &Batch,
    tape: &Tape,
    classes: usize,
    proxies: Option<&Parameter>,
    pair_rng: &mut ChaCha8Rng,
) -> Result<(Tensor, GradSlots), TrainError> {
    let enc = model.encode(batch, tape)?;
    let d = model.dim;

    let pooled_row = |i: usize| -> Result<Tensor, TrainError> {
        Ok(enc.pooled.gather_rows(&[i])?.reshape(&[d])?)
    };

    let proxy_leaf = |shape: &[usize]| -> Tensor {
        let p = proxies.expect("objective requires proxies");
        tape.tensor(shape, p.data.clone(), true)
    };

    let (loss, proxy_grad_src): (Tensor, Option<Tensor>) = match objective {
        Objective::Ce => {
            let targets = one_hot(tape, &batch.labels, classes)?;
            (multinomial_cross_entropy(&enc.probs, &targets)?, None)
        }
        Objective::TripleEntropy(h) => {
            let leaf = proxy_leaf(&[classes, h.k, d]);
            let st = SoftTripleParams::new(leaf.clone(), h.gamma, h.lambda, h.delta)?;
            let params = TripleEntropyParams::new(h.beta, st)?;
            let targets = one_hot(tape, &batch.labels, classes)?;
            let (flat, token_labels) =
                token_views_for_dml(&enc.token_embeddings, &batch.pad_mask, &batch.labels)?;
            (
                triple_entropy_loss(&enc.probs, &targets, &flat, &token_labels, &params)?,
                Some(leaf),
            )
        }
        Objective::SoftTriple(h) => {
            let leaf = proxy_leaf(&[classes, h.k, d]);
            let st = SoftTripleParams::new(leaf.clone(), h.gamma, h.lambda, h.delta)?;
            let (flat, token_labels) =
                token_views_for_dml(&enc.token_embeddings, &batch.pad_mask, &batch.labels)?;
            (soft_triple_loss(&flat, &token_labels, &st)?, Some(leaf))
        }
        Objective::ProxyNca => {
            let leaf = proxy_leaf(&[classes, d]);
            let params = ProxyNcaParams::new(leaf.clone())?;
            let mut terms = Vec::with_capacity(batch.rows());
            for i in 0..batch.rows() {
                let x = pooled_row(i)?;
                terms.push(proxy_nca_loss(&x, batch.labels[i], &params)?.reshape(&[1, 1])?);
            }
            (Tensor::concat_rows(&terms)?.mean(), Some(leaf))
        }
        Objective::Contrastive { margin } => {
            let params = ContrastiveParams::new(*margin)?;
            let n = batch.rows();
            let mut terms = Vec::with_capacity(n);
            // A one-row batch has no partner to pair with.
            for i in 0..if n < 2 { 0 } else { n } {
                let mut j = pair_rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                let label = if batch.labels[i] == batch.labels[j] {
                    PairLabel::Similar
                } else {
                    PairLabel::Dissimilar
                };
                let a = pooled_row(i)?;
                let b = pooled_row(j)?;
                terms.push(contrastive_loss(&a, &b, label, &params)?.reshape(&[1, 1])?);
            }
            let loss = if terms.is_empty() {
                tape.scalar(0.0)
            } else {
                Tensor::concat_rows(&terms)?.mean()
            };
            (loss, None)
        }
        Objective::Triplet { alpha } => {
            let params = TripletParams::new(*alpha)?;
            let n = batch.rows();
            let mut terms = Vec::new();
            for i in 0..n {
                let positives: Vec<usize> = (0..n)
                    .filter(|&j| j != i && batch.labels[j] == batch.labels[i])
                    .collect();
                let negatives: Vec<usize> =
                    (0..n).filter(|&j| batch.labels[j] != batch.labels[i]).collect();
                if positives.is_empty() || negatives.is_empty() {
                    continue;
                }
                let p = positives[pair_rng.random_range(0..positives.len())];
                let neg = negatives[pair_rng.random_range(0..negatives.len())];
                let a = pooled_row(i)?;
                let pos = pooled_row(p)?;
                let negt = pooled_row(neg)?;
                terms.push(triplet_loss(&a, &pos, &negt, &params)?.reshape(&[1, 1])?);
            }
            let loss = if terms.is_empty() {
                tape.scalar(0.0)
            } else {
                Tensor::concat_rows(&terms)?.mean()
            };
            (loss, None)
        }
    };

    let value = loss.scalar_value()?;
    if !value.is_finite() {
        return Err(TrainError::NanLoss {
            config: objective.to_string(),
        });
    }
    loss.backward()?;

    let mut grads = enc.leaves.grads();
    if proxies.is_some() {
        grads.push(proxy_grad_src.and_then(|t| t.grad()));
    }
    Ok((loss, grads))
}

/// A blown-up run surfaces as a non-finite value somewhere inside the
/// encoder or a loss; report it as the run's loss diverging, with the
/// config echoed.
fn as_diverged(e: TrainError, objective: &Objective) -> TrainError {
    use crate::diffcore::DiffError::NonFinite;
    match e {
        TrainError::Diff(NonFinite { .. })
        | TrainError::Encoder(crate::encoder::EncoderError::Diff(NonFinite { .. }))
        | TrainError::Loss(crate::losses::LossError::Diff(NonFinite { .. })) => {
            TrainError::NanLoss {
                config: objective.to_string(),
            }
        }
        other => other,
    }
}

/// Train one model on `train_idx`, evaluating on `val_idx` after each
/// epoch. Deterministic given all arguments: the vocabulary comes from
/// the training split only, and initialization, shuffling, proxy draws,
/// and pair sampling each use an independent stream of `seed`.
pub fn train_one(
    config: &RunConfig,
    seed: u64,
    train_idx: &[usize],
    val_idx: &[usize],
    ds: &TextDataset,
) -> Result<TrainOutcome, TrainError> {
    if let Some(&overlap) = train_idx.iter().find(|i| val_idx.contains(i)) {
        return Err(TrainError::OverlappingSplits(overlap));
    }
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(TrainError::InvalidPlan(
            "empty train or validation split".to_string(),
        ));
    }

    let vocab = {
        let mut texts = Vec::with_capacity(train_idx.len() * 2);
        for &i in train_idx {
            texts.push(ds.records[i].text.as_str());
            if let Some(t2) = &ds.records[i].text2 {
                texts.push(t2.as_str());
            }
        }
        Vocabulary::build(texts)
    };

    let classes = ds.num_classes();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_stream::MODEL_INIT));
    let mut model = EncoderModel::init(vocab.len(), config.settings.dim, classes, &mut init_rng);
    let mut proxies = proxies_for(&config.objective, classes, config.settings.dim, seed);

    let adamw = AdamWConfig {
        base_lr: config.settings.lr,
        weight_decay: config.settings.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt_state = {
        let mut params = model.params();
        if let Some(p) = &proxies {
            params.push(p);
        }
        OptimizerState::new(&params, adamw)
    };

    let batches_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let schedule = Schedule::new(batches_per_epoch * config.epochs, config.settings.lr);
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_stream::EPOCH_SHUFFLE));
    let mut pair_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_stream::PAIR_SAMPLING));

    let val_batches: Vec<Batch> = val_idx
        .chunks(config.batch_size)
        .map(|chunk| {
            let records: Vec<_> = chunk.iter().map(|&i| &ds.records[i]).collect();
            Batch::from_records(&records, &vocab)
        })
        .collect();

    let mut order: Vec<usize> = train_idx.to_vec();
    let mut loss_trace = Vec::with_capacity(schedule.total_steps);
    let mut best_accuracy = 0.0f64;
    let mut stagnant = 0usize;
    let mut epochs_trained = 0usize;
    let mut global_step = 0usize;

    for _epoch in 0..config.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let records: Vec<_> = chunk.iter().map(|&i| &ds.records[i]).collect();
            let batch = Batch::from_records(&records, &vocab);
            let tape = Tape::new();
            let (loss, grads) = batch_loss(
                &config.objective,
                &model,
                &batch,
                &tape,
                classes,
                proxies.as_ref(),
                &mut pair_rng,
            )
            .map_err(|e| as_diverged(e, &config.objective))?;
            loss_trace.push(loss.scalar_value()?);

            let lr = lr_at(global_step, &schedule)?;
            global_step += 1;
            let mut params = model.params_mut();
            if let Some(p) = &mut proxies {
                params.push(p);
            }
            optimizer_step(&mut params, &grads, &mut opt_state, lr)?;
        }
        epochs_trained += 1;

        // Validation accuracy under the objective's own decision rule.
        let centroid_holder;
        let prototypes_ref = match &config.objective {
            Objective::Contrastive { .. } | Objective::Triplet { .. } => {
                centroid_holder =
                    class_centroids(&model, &vocab, ds, train_idx, config.batch_size)?;
                Some(&centroid_holder)
            }
            _ => proxies.as_ref(),
        };
        let evaluator = Evaluator {
            rule: EvalRule::for_objective(&config.objective),
            prototypes: prototypes_ref,
        };
        let mut correct = 0usize;
        let mut total = 0usize;
        for batch in &val_batches {
            let tape = Tape::new();
            let predictions = evaluator
                .classify_batch(&model, batch, &tape)
                .map_err(|e| as_diverged(e, &config.objective))?;
            for (pred, &label) in predictions.iter().zip(&batch.labels) {
                correct += usize::from(*pred == label);
                total += 1;
            }
        }
        let accuracy = correct as f64 / total as f64;

        if accuracy > best_accuracy {
            best_accuracy = accuracy;
            stagnant = 0;
        } else {
            stagnant += 1;
            if stagnant >= config.settings.early_stop_patience {
                break;
            }
        }
    }

    let prototypes = match &config.objective {
        Objective::Contrastive { .. } | Objective::Triplet { .. } => Some(class_centroids(
            &model,
            &vocab,
            ds,
            train_idx,
            config.batch_size,
        )?),
        _ => proxies,
    };

    Ok(TrainOutcome {
        val_accuracy: best_accuracy,
        epochs_trained,
        loss_trace,
        model,
        vocab,
        prototypes,
    })
}

/// Execution options for [`run_grid`].
#[derive(Clone, Debug)]
pub struct GridOptions {
    /// Worker threads; results are identical for any value.
    pub jobs: usize,
    /// Append one json record line per completed run to this file.
    pub sink_path: Option<PathBuf>,
    /// Skip runs already present in the sink file.
    pub resume: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            jobs: 1,
            sink_path: None,
            resume: false,
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
struct SinkHeader {
    dataset: String,
    sampling: Option<String>,
    dataset_size: usize,
    seeds: Vec<u64>,
    fold_count: usize,
    batch_size: usize,
    epochs: usize,
    configs: Vec<String>,
}

impl SinkHeader {
    fn for_plan(plan: &ExperimentPlan, ds: &TextDataset) -> SinkHeader {
        SinkHeader {
            dataset: ds.provenance.source.clone(),
            sampling: ds.provenance.sampling.clone(),
            dataset_size: ds.len(),
            seeds: plan.seeds.clone(),
            fold_count: plan.fold_count,
            batch_size: plan.batch_size,
            epochs: plan.epochs,
            configs: plan.grid.iter().map(|o| o.to_string()).collect(),
        }
    }
}

/// Run every `(config, seed, fold)` job of the plan and aggregate the
/// results. Jobs are independent and deterministic, so the report does
/// not depend on `jobs`; with a sink file, completed runs persist and
/// `resume` picks up where an interrupted search stopped.
pub fn run_grid(
    plan: &ExperimentPlan,
    ds: &TextDataset,
    opts: &GridOptions,
) -> Result<RunReport, TrainError> {
    plan.validate()?;
    let header = SinkHeader::for_plan(plan, ds);

    // Load completed records when resuming.
    let mut completed: Vec<RunRecord> = Vec::new();
    if opts.resume {
        if let Some(path) = &opts.sink_path {
            if path.exists() {
                let text =
                    std::fs::read_to_string(path).map_err(|e| TrainError::Sink {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                let mut lines = text.lines();
                let head_line = lines.next().ok_or_else(|| TrainError::Sink {
                    path: path.display().to_string(),
                    message: "empty results file".to_string(),
                })?;
                let found: SinkHeader =
                    serde_json::from_str(head_line).map_err(|e| TrainError::Sink {
                        path: path.display().to_string(),
                        message: format!("bad header: {e}"),
                    })?;
                if found != header {
                    return Err(TrainError::Sink {
                        path: path.display().to_string(),
                        message: "results file belongs to a different plan or dataset".to_string(),
                    });
                }
                for (i, line) in lines.enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let record: RunRecord =
                        serde_json::from_str(line).map_err(|e| TrainError::Sink {
                            path: path.display().to_string(),
                            message: format!("record line {}: {e}", i + 2),
                        })?;
                    completed.push(record);
                }
            }
        }
    }

    // Open the sink, writing the header for a fresh file.
    let sink: Option<Mutex<std::fs::File>> = match &opts.sink_path {
        Some(path) => {
            let fresh = !(opts.resume && path.exists());
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| TrainError::Sink {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            if fresh {
                let line = serde_json::to_string(&header).expect("header serializes");
                writeln!(file, "{line}").map_err(|e| TrainError::Sink {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            }
            Some(Mutex::new(file))
        }
        None => None,
    };

    // Fold splits depend only on (dataset, seed).
    let mut splits = Vec::with_capacity(plan.seeds.len());
    for &seed in &plan.seeds {
        splits.push(stratified_kfold(
            ds,
            plan.fold_count,
            derive_seed(seed, seed_stream::FOLD_SPLIT),
        )?);
    }

    let done: std::collections::HashSet<(usize, u64, usize)> = completed
        .iter()
        .map(|r| (r.config_id, r.seed, r.fold))
        .collect();

    struct Job<'a> {
        config_id: usize,
        config: RunConfig,
        config_name: String,
        seed: u64,
        fold: usize,
        split: &'a crate::data::Fold,
    }

    let mut jobs = Vec::new();
    for (config_id, objective) in plan.grid.iter().enumerate() {
        let config = plan.run_config(objective);
        for (si, &seed) in plan.seeds.iter().enumerate() {
            for fold in 0..plan.fold_count {
                if done.contains(&(config_id, seed, fold)) {
                    continue;
                }
                jobs.push(Job {
                    config_id,
                    config: config.clone(),
                    config_name: objective.to_string(),
                    seed,
                    fold,
                    split: &splits[si].folds[fold],
                });
            }
        }
    }

    let run_job = |job: &Job| -> Result<RunRecord, TrainError> {
        let start = Instant::now();
        let outcome = train_one(
            &job.config,
            job.seed,
            &job.split.train,
            &job.split.validation,
            ds,
        )?;
        let record = RunRecord {
            config_id: job.config_id,
            config: job.config_name.clone(),
            seed: job.seed,
            fold: job.fold,
            val_accuracy: outcome.val_accuracy,
            epochs_trained: outcome.epochs_trained,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        if let Some(sink) = &sink {
            let line = serde_json::to_string(&record).expect("record serializes");
            let mut file = sink.lock().expect("sink lock");
            writeln!(file, "{line}").and_then(|_| file.flush()).map_err(|e| {
                TrainError::Sink {
                    path: opts
                        .sink_path
                        .as_ref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_default(),
                    message: e.to_string(),
                }
            })?;
        }
        Ok(record)
    };

    let mut fresh: Vec<RunRecord> = if opts.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| TrainError::InvalidPlan(format!("cannot build thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_job).collect::<Result<Vec<_>, _>>())?
    } else {
        jobs.iter().map(run_job).collect::<Result<Vec<_>, _>>()?
    };

    let mut records = completed;
    records.append(&mut fresh);

    let meta = ReportMeta {
        dataset: ds.provenance.source.clone(),
        sampling: ds.provenance.sampling.clone(),
        dataset_size: ds.len(),
        size_bucket: SizeBucket::for_size(ds.len()),
        seeds: plan.seeds.clone(),
        fold_count: plan.fold_count,
        batch_size: plan.batch_size,
        epochs: plan.epochs,
    };
    RunReport::build(meta, records).map_err(|e| TrainError::InvalidPlan(e.to_string()))
}
