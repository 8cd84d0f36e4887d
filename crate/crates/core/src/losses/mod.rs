//! The loss zoo: contrastive, triplet, ProxyNCA, SoftTriple, multinomial
//! cross-entropy, and the composite TripleEntropy objective.
//!
//! All losses are pure functions over tape tensors; gradients flow into
//! whatever inputs were recorded with `requires_grad` (embeddings, proxy
//! weights, and anything upstream of them).
//!
//! Conventions:
//! - Contrastive uses `L_S(D) = D^2` and `L_D(D) = max(0, m - D)^2` with
//!   `D` the Euclidean distance.
//! - ProxyNCA measures squared Euclidean distance between L2-normalized
//!   vectors, and its denominator runs over the *negative* proxies only.
//! - SoftTriple uses raw inner products by default; `normalize` switches
//!   to unit-normalized embeddings and proxies for comparison runs.
//! - Batch reductions are means, so the TripleEntropy mixing weight
//!   combines commensurate magnitudes.

use crate::diffcore::{DiffError, Tensor};
use thiserror::Error;

/// Probabilities are clamped to `[PROB_EPSILON, 1]` before any log.
pub const PROB_EPSILON: f64 = 1e-12;

/// How far a probability row may drift from summing to 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("degenerate task: need at least 2 classes, got {0}")]
    DegenerateTask(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

type Result<T> = std::result::Result<T, LossError>;

/// Whether a pair shares a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

/// Margin for the dissimilar-pair hinge of the contrastive loss.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveParams {
    margin: f64,
}

impl ContrastiveParams {
    pub fn new(margin: f64) -> Result<Self> {
        if margin.is_nan() || margin < 0.0 {
            return Err(LossError::InvalidParam(format!(
                "contrastive margin must be >= 0, got {margin}"
            )));
        }
        Ok(Self { margin })
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

/// Margin between positive and negative pairs in the triplet loss.
#[derive(Clone, Copy, Debug)]
pub struct TripletParams {
    alpha: f64,
}

impl TripletParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha.is_nan() || alpha < 0.0 {
            return Err(LossError::InvalidParam(format!(
                "triplet margin must be >= 0, got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// One learnable proxy per class, rows of a `[C, d]` tensor.
#[derive(Clone)]
pub struct ProxyNcaParams {
    proxies: Tensor,
}

impl ProxyNcaParams {
    pub fn new(proxies: Tensor) -> Result<Self> {
        let shape = proxies.shape();
        if shape.len() != 2 {
            return Err(LossError::InvalidParam(format!(
                "proxy matrix must be [classes, dim], got {shape:?}"
            )));
        }
        if proxies.data().iter().any(|v| !v.is_finite()) {
            return Err(LossError::InvalidParam(
                "proxy matrix contains non-finite values".to_string(),
            ));
        }
        Ok(Self { proxies })
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.shape()[0]
    }

    pub fn proxies(&self) -> &Tensor {
        &self.proxies
    }
}

/// SoftTriple parameters: `k` proxies per class stored as `[C, k, d]`,
/// with the entropy scale `gamma`, the outlier scale `lambda`, and the
/// margin `delta`.
#[derive(Clone)]
pub struct SoftTripleParams {
    proxies: Tensor,
    gamma: f64,
    lambda: f64,
    delta: f64,
    normalize: bool,
}

impl SoftTripleParams {
    pub fn new(proxies: Tensor, gamma: f64, lambda: f64, delta: f64) -> Result<Self> {
        let shape = proxies.shape();
        if shape.len() != 3 {
            return Err(LossError::InvalidParam(format!(
                "proxy tensor must be [classes, proxies, dim], got {shape:?}"
            )));
        }
        if shape[1] < 1 {
            return Err(LossError::InvalidParam(
                "need at least one proxy per class".to_string(),
            ));
        }
        if gamma.is_nan() || gamma <= 0.0 {
            return Err(LossError::InvalidParam(format!(
                "gamma must be > 0, got {gamma}"
            )));
        }
        if lambda.is_nan() || lambda <= 0.0 {
            return Err(LossError::InvalidParam(format!(
                "lambda must be > 0, got {lambda}"
            )));
        }
        if delta.is_nan() || delta < 0.0 {
            return Err(LossError::InvalidParam(format!(
                "delta must be >= 0, got {delta}"
            )));
        }
        if proxies.data().iter().any(|v| !v.is_finite()) {
            return Err(LossError::InvalidParam(
                "proxy tensor contains non-finite values".to_string(),
            ));
        }
        Ok(Self {
            proxies,
            gamma,
            lambda,
            delta,
            normalize: false,
        })
    }

    /// Switch to the unit-normalized variant (off by default).
    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.shape()[0]
    }

    pub fn proxies_per_class(&self) -> usize {
        self.proxies.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.proxies.shape()[2]
    }

    pub fn proxies(&self) -> &Tensor {
        &self.proxies
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Proxy rows of class `c` as a `[k, d]` matrix, unit-normalized when
    /// the normalized variant is active.
    fn class_proxies(&self, c: usize) -> Result<Tensor> {
        let k = self.proxies_per_class();
        let d = self.dim();
        let flat = self.proxies.reshape(&[self.num_classes() * k, d])?;
        let indices: Vec<usize> = (c * k..(c + 1) * k).collect();
        let rows = flat.gather_rows(&indices)?;
        if self.normalize {
            normalize_rows(&rows)
        } else {
            Ok(rows)
        }
    }
}

/// Mixing weight for the composite objective plus its SoftTriple half.
#[derive(Clone)]
pub struct TripleEntropyParams {
    beta: f64,
    soft_triple: SoftTripleParams,
}

impl TripleEntropyParams {
    pub fn new(beta: f64, soft_triple: SoftTripleParams) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(LossError::InvalidParam(format!(
                "beta must lie in [0, 1], got {beta}"
            )));
        }
        Ok(Self { beta, soft_triple })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn soft_triple(&self) -> &SoftTripleParams {
        &self.soft_triple
    }
}

/// Divide each row of a `[m, n]` matrix by its L2 norm.
fn normalize_rows(m: &Tensor) -> Result<Tensor> {
    let shape = m.shape();
    let (rows, cols) = (shape[0], shape[1]);
    let data = m.data();
    for r in 0..rows {
        let sq: f64 = data[r * cols..(r + 1) * cols].iter().map(|v| v * v).sum();
        if sq == 0.0 {
            return Err(LossError::ZeroNorm);
        }
    }
    let ones = m.tape().constant(&[cols, 1], vec![1.0; cols]);
    // Row norms as a [rows] vector, then divide through the transpose so
    // the row-vector broadcast applies.
    let norms = m.mul(m)?.matmul(&ones)?.sqrt()?.transpose()?.reshape(&[rows])?;
    Ok(m.transpose()?.div(&norms)?.transpose()?)
}

/// Divide a vector by its L2 norm.
fn normalize_vector(x: &Tensor) -> Result<Tensor> {
    let sq: f64 = x.data().iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return Err(LossError::ZeroNorm);
    }
    let norm = x.l2_norm()?;
    Ok(x.div(&norm)?)
}

/// A constant one-hot matrix `[n, classes]` for the given labels.
pub fn one_hot(tape: &crate::diffcore::Tape, labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(LossError::LabelOutOfRange { label: l, classes });
        }
        data[i * classes + l] = 1.0;
    }
    Ok(tape.constant(&[labels.len(), classes], data))
}

/// Mean negative log-likelihood `-(1/N) sum_i sum_c y_ic log p_ic`.
///
/// `probs` rows must already sum to 1 within [`ROW_SUM_TOLERANCE`];
/// `targets` must be exactly one-hot. Probabilities are clamped to
/// `[PROB_EPSILON, 1]` before the log.
pub fn multinomial_cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(LossError::Contract(format!(
            "probabilities must be [batch, classes], got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    if targets.shape() != shape {
        return Err(LossError::Contract(format!(
            "targets shape {:?} does not match probabilities {:?}",
            targets.shape(),
            shape
        )));
    }
    let p = probs.data();
    for row in 0..n {
        let sum: f64 = p[row * c..(row + 1) * c].iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(LossError::Contract(format!(
                "probability row {row} sums to {sum}, not 1"
            )));
        }
    }
    let t = targets.data();
    for row in 0..n {
        let r = &t[row * c..(row + 1) * c];
        let ones = r.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || r.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(LossError::Contract(format!(
                "target row {row} is not one-hot"
            )));
        }
    }
    let picked = probs.clamp(PROB_EPSILON, 1.0).log()?.mul(targets)?;
    Ok(picked.sum().mul_scalar(-1.0 / n as f64))
}

/// Contrastive pair loss: `D^2` for similar pairs, `max(0, m - D)^2` for
/// dissimilar ones, with `D` the Euclidean distance.
pub fn contrastive_loss(
    x1: &Tensor,
    x2: &Tensor,
    label: PairLabel,
    params: &ContrastiveParams,
) -> Result<Tensor> {
    if x1.shape() != x2.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "contrastive_loss",
            lhs: x1.shape(),
            rhs: x2.shape(),
        }
        .into());
    }
    let sq = x1.squared_distance(x2)?;
    match label {
        PairLabel::Similar => Ok(sq),
        PairLabel::Dissimilar => {
            let hinge = sq.sqrt()?.neg().add_scalar(params.margin).relu();
            Ok(hinge.mul(&hinge)?)
        }
    }
}

/// Single-triplet hinge `[|a - p|^2 - |a - n|^2 + alpha]_+`. A batch sums
/// these terms.
pub fn triplet_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    params: &TripletParams,
) -> Result<Tensor> {
    if anchor.shape() != positive.shape() || anchor.shape() != negative.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "triplet_loss",
            lhs: anchor.shape(),
            rhs: if anchor.shape() != positive.shape() {
                positive.shape()
            } else {
                negative.shape()
            },
        }
        .into());
    }
    let pos = anchor.squared_distance(positive)?;
    let neg = anchor.squared_distance(negative)?;
    Ok(pos.sub(&neg)?.add_scalar(params.alpha).relu())
}

/// ProxyNCA loss for one example: distances are squared Euclidean between
/// the normalized example and normalized proxies, and the denominator
/// excludes the positive class's proxy.
pub fn proxy_nca_loss(x: &Tensor, label: usize, params: &ProxyNcaParams) -> Result<Tensor> {
    let classes = params.num_classes();
    if label >= classes {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    if classes < 2 {
        return Err(LossError::DegenerateTask(classes));
    }
    let normalized = normalize_rows(params.proxies())?;
    let x_hat = normalize_vector(x)?;

    let dist_to = |c: usize| -> Result<Tensor> {
        let proxy = normalized.gather_rows(&[c])?.reshape(&[x_hat.numel()])?;
        Ok(x_hat.squared_distance(&proxy)?)
    };

    let positive = dist_to(label)?;
    let mut negatives = Vec::with_capacity(classes - 1);
    for c in (0..classes).filter(|&c| c != label) {
        negatives.push(dist_to(c)?.neg().exp().reshape(&[1, 1])?);
    }
    let denom = Tensor::concat_rows(&negatives)?.sum().log()?;
    // -log(exp(-d_pos) / sum exp(-d_neg)) = d_pos + log sum exp(-d_neg)
    Ok(positive.add(&denom)?)
}

/// Relaxed similarity between one embedding and one class: the softmax
/// (at temperature `gamma`) over the k proxy inner products, re-weighting
/// those same inner products.
pub fn soft_triple_similarity(
    embedding: &Tensor,
    class_id: usize,
    params: &SoftTripleParams,
) -> Result<Tensor> {
    if class_id >= params.num_classes() {
        return Err(LossError::LabelOutOfRange {
            label: class_id,
            classes: params.num_classes(),
        });
    }
    let d = params.dim();
    if embedding.numel() != d {
        return Err(DiffError::ShapeMismatch {
            op: "soft_triple_similarity",
            lhs: embedding.shape(),
            rhs: vec![d],
        }
        .into());
    }
    let e = if params.normalize {
        normalize_vector(embedding)?
    } else {
        embedding.clone()
    };
    let proxies = params.class_proxies(class_id)?;
    let sims = proxies
        .matmul(&e.reshape(&[d, 1])?)?
        .reshape(&[params.proxies_per_class()])?;
    if sims.data().iter().any(|v| !v.is_finite()) {
        return Err(DiffError::NonFinite {
            op: "soft_triple_similarity",
        }
        .into());
    }
    let weights = sims.mul_scalar(1.0 / params.gamma).softmax()?;
    Ok(weights.mul(&sims)?.sum())
}

/// SoftTriple loss over a batch of embeddings `[M, d]`: mean over examples
/// of the margin softmax on relaxed similarities, stabilized via
/// log-softmax.
pub fn soft_triple_loss(
    embeddings: &Tensor,
    labels: &[usize],
    params: &SoftTripleParams,
) -> Result<Tensor> {
    let shape = embeddings.shape();
    if shape.len() != 2 || shape[1] != params.dim() {
        return Err(DiffError::ShapeMismatch {
            op: "soft_triple_loss",
            lhs: shape,
            rhs: vec![labels.len(), params.dim()],
        }
        .into());
    }
    let m = shape[0];
    if m == 0 || labels.len() != m {
        return Err(LossError::Contract(format!(
            "need one label per embedding: {} embeddings, {} labels",
            m,
            labels.len()
        )));
    }
    let classes = params.num_classes();
    if classes < 2 {
        return Err(LossError::DegenerateTask(classes));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(LossError::LabelOutOfRange { label: bad, classes });
    }

    let e = if params.normalize {
        normalize_rows(embeddings)?
    } else {
        embeddings.clone()
    };
    let k = params.proxies_per_class();
    let ones = e.tape().constant(&[k, 1], vec![1.0; k]);

    // Column c of the [M, C] relaxed-similarity matrix, built per class
    // and stacked as rows of the transpose.
    let mut sim_rows = Vec::with_capacity(classes);
    for c in 0..classes {
        let proxies = params.class_proxies(c)?;
        let sims = e.matmul(&proxies.transpose()?)?; // [M, k]
        if sims.data().iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite {
                op: "soft_triple_loss",
            }
            .into());
        }
        let weights = sims.mul_scalar(1.0 / params.gamma).softmax()?;
        let s_col = weights.mul(&sims)?.matmul(&ones)?; // [M, 1]
        sim_rows.push(s_col.transpose()?);
    }
    let relaxed = Tensor::concat_rows(&sim_rows)?.transpose()?; // [M, C]

    let targets = one_hot(e.tape(), labels, classes)?;
    let logits = relaxed
        .sub(&targets.mul_scalar(params.delta))?
        .mul_scalar(params.lambda);
    let log_probs = logits.log_softmax()?;
    Ok(log_probs.mul(&targets)?.sum().mul_scalar(-1.0 / m as f64))
}

/// The composite objective `beta * CE + (1 - beta) * SoftTriple`.
///
/// `probs`/`targets` feed the cross-entropy half at sentence level;
/// `token_embeddings`/`token_labels` feed SoftTriple, one row per
/// non-padding token, each labeled with its sentence's class. At
/// `beta = 1` or `beta = 0` the untouched half is skipped entirely, so
/// the degenerate cases are bit-exact.
pub fn triple_entropy_loss(
    probs: &Tensor,
    targets: &Tensor,
    token_embeddings: &Tensor,
    token_labels: &[usize],
    params: &TripleEntropyParams,
) -> Result<Tensor> {
    let beta = params.beta;
    if beta == 1.0 {
        return multinomial_cross_entropy(probs, targets);
    }
    if beta == 0.0 {
        return soft_triple_loss(token_embeddings, token_labels, &params.soft_triple);
    }
    let ce = multinomial_cross_entropy(probs, targets)?;
    let st = soft_triple_loss(token_embeddings, token_labels, &params.soft_triple)?;
    Ok(ce.mul_scalar(beta).add(&st.mul_scalar(1.0 - beta))?)
}
