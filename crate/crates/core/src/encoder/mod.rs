//! A small trainable text encoder: whitespace/punctuation tokenizer,
//! embedding table, per-token two-layer feed-forward transform, mask-aware
//! mean pooling, and a softmax classifier head.
//!
//! The encoder exposes two views of a batch: pooled sentence logits for
//! cross-entropy, and the full per-token embedding matrix for losses that
//! consume every token. Padding positions are carried through the token
//! output and masked downstream.

use crate::data::Record;
use crate::diffcore::{DiffError, Tape, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

pub const CLS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const PAD_ID: usize = 3;
pub const UNK_ID: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[CLS]", "[EOS]", "[SEP]", "[PAD]", "[UNK]"];

/// Hard cap on tokenized sequence length.
pub const MAX_LEN: usize = 512;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("vocabulary file {path}: {message}")]
    VocabFormat { path: String, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

type Result<T> = std::result::Result<T, EncoderError>;

/// Token-to-id table with the five special tokens pinned at the front.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    tokens: Vec<String>,
}

/// Lowercased alphanumeric runs; everything else is a separator.
fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

impl Vocabulary {
    /// Build from training texts only; ids are assigned in first-seen
    /// order after the special tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self::specials_only();
        for text in texts {
            for w in words(text) {
                vocab.intern(w);
            }
        }
        vocab
    }

    fn specials_only() -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            token_to_id,
            tokens,
        }
    }

    fn intern(&mut self, word: String) {
        if !self.token_to_id.contains_key(&word) {
            self.token_to_id.insert(word.clone(), self.tokens.len());
            self.tokens.push(word);
        }
    }

    /// Total token count; never below the five specials.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// One token per line, specials first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        std::fs::write(path, body).map_err(|source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens[..SPECIAL_TOKENS.len()]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(EncoderError::VocabFormat {
                path: path.display().to_string(),
                message: "special tokens missing or out of order".to_string(),
            });
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            token_to_id,
            tokens,
        })
    }
}

/// Tokenize one text: `[CLS] tokens [EOS]`, truncated to [`MAX_LEN`] with
/// the final `[EOS]` preserved. Unknown words map to `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    tokenize_impl(text, None, vocab)
}

/// Tokenize a sentence pair: `[CLS] first [SEP] second [EOS]`.
pub fn tokenize_pair(first: &str, second: &str, vocab: &Vocabulary) -> Vec<usize> {
    tokenize_impl(first, Some(second), vocab)
}

fn tokenize_impl(first: &str, second: Option<&str>, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids = vec![CLS_ID];
    let push_words = |text: &str, ids: &mut Vec<usize>| {
        for w in words(text) {
            ids.push(vocab.id(&w).unwrap_or(UNK_ID));
        }
    };
    push_words(first, &mut ids);
    if let Some(second) = second {
        ids.push(SEP_ID);
        push_words(second, &mut ids);
    }
    ids.push(EOS_ID);
    if ids.len() > MAX_LEN {
        ids.truncate(MAX_LEN - 1);
        ids.push(EOS_ID);
    }
    ids
}

/// A padded batch: token ids `[B, L]`, a non-padding mask, and one label
/// per row. `L` is the longest sequence in the batch, never above
/// [`MAX_LEN`].
#[derive(Clone, Debug)]
pub struct Batch {
    pub token_ids: Vec<Vec<usize>>,
    pub pad_mask: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Tokenize and pad a slice of records.
    pub fn from_records(records: &[&Record], vocab: &Vocabulary) -> Batch {
        let sequences: Vec<Vec<usize>> = records
            .iter()
            .map(|r| match &r.text2 {
                Some(second) => tokenize_pair(&r.text, second, vocab),
                None => tokenize(&r.text, vocab),
            })
            .collect();
        let max_len = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(sequences.len());
        let mut pad_mask = Vec::with_capacity(sequences.len());
        for mut seq in sequences {
            let mut mask = vec![true; seq.len()];
            mask.resize(max_len, false);
            seq.resize(max_len, PAD_ID);
            token_ids.push(seq);
            pad_mask.push(mask);
        }
        Batch {
            token_ids,
            pad_mask,
            labels: records.iter().map(|r| r.label).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.token_ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.first().map(|r| r.len()).unwrap_or(0)
    }
}

/// One named parameter block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Draw from N(0, 1) via Box-Muller on the rng's unit doubles, scaled by
/// `scale`. Kept local so parameter initialization is pinned to this
/// crate, not to a distribution crate's sampling internals.
pub(crate) fn normal_draws(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    use rand::Rng;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos() * scale);
        if out.len() < n {
            out.push(r * theta.sin() * scale);
        }
    }
    out
}

/// Embedding table + per-token feed-forward transform + classifier head.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub dim: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub embedding: Parameter,
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
    pub head_w: Parameter,
    pub head_b: Parameter,
}

/// Tape handles for every model parameter in one forward pass.
#[derive(Debug)]
pub struct EncoderLeaves {
    pub embedding: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl EncoderLeaves {
    /// Gradients in the same order as [`EncoderModel::params`].
    pub fn grads(&self) -> Vec<Option<Vec<f64>>> {
        [
            &self.embedding,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.head_w,
            &self.head_b,
        ]
        .iter()
        .map(|t| t.grad())
        .collect()
    }
}

/// Everything one forward pass produces.
#[derive(Debug)]
pub struct EncodeOutput {
    /// Post-transform per-token embeddings, `[B, L, d]`. No positions are
    /// dropped here; padding is masked downstream.
    pub token_embeddings: Tensor,
    /// Mask-aware mean of non-padding token embeddings, `[B, d]`.
    pub pooled: Tensor,
    /// Row-stochastic class probabilities, `[B, C]`.
    pub probs: Tensor,
    pub leaves: EncoderLeaves,
}

impl EncoderModel {
    /// Seeded initialization: weights from N(0, 1/sqrt(d)), biases zero.
    pub fn init(vocab_size: usize, dim: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let param = |name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng| Parameter {
            name: name.to_string(),
            data: normal_draws(rng, shape.iter().product(), scale),
            shape,
        };
        let zeros = |name: &str, shape: Vec<usize>| Parameter {
            name: name.to_string(),
            data: vec![0.0; shape.iter().product()],
            shape,
        };
        EncoderModel {
            dim,
            num_classes,
            vocab_size,
            max_len: MAX_LEN,
            embedding: param("embedding", vec![vocab_size, dim], rng),
            w1: param("w1", vec![dim, dim], rng),
            b1: zeros("b1", vec![dim]),
            w2: param("w2", vec![dim, dim], rng),
            b2: zeros("b2", vec![dim]),
            head_w: param("head_w", vec![dim, num_classes], rng),
            head_b: zeros("head_b", vec![num_classes]),
        }
    }

    /// Parameters in a fixed order shared with [`EncoderLeaves::grads`].
    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.embedding,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.embedding,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    /// Forward pass over a batch on the given tape.
    pub fn encode(&self, batch: &Batch, tape: &Tape) -> Result<EncodeOutput> {
        let (b, l, d) = (batch.rows(), batch.seq_len(), self.dim);
        let mut flat_ids = Vec::with_capacity(b * l);
        for row in &batch.token_ids {
            for &id in row {
                if id >= self.vocab_size {
                    return Err(EncoderError::IdOutOfRange {
                        id,
                        size: self.vocab_size,
                    });
                }
                flat_ids.push(id);
            }
        }

        let leaf = |p: &Parameter| tape.tensor(&p.shape, p.data.clone(), true);
        let leaves = EncoderLeaves {
            embedding: leaf(&self.embedding),
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
            head_w: leaf(&self.head_w),
            head_b: leaf(&self.head_b),
        };

        let looked_up = leaves.embedding.gather_rows(&flat_ids)?; // [B*L, d]
        let hidden = looked_up
            .matmul(&leaves.w1)?
            .add(&leaves.b1)?
            .relu();
        let tokens_2d = hidden.matmul(&leaves.w2)?.add(&leaves.b2)?; // [B*L, d]
        let token_embeddings = tokens_2d.reshape(&[b, l, d])?;

        // Pooling matrix: row b holds 1/count_b at its non-pad positions.
        let mut pool = vec![0.0; b * b * l];
        for (row, mask) in batch.pad_mask.iter().enumerate() {
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                continue; // all-padding row pools to the zero vector
            }
            let w = 1.0 / count as f64;
            for (t, &m) in mask.iter().enumerate() {
                if m {
                    pool[row * b * l + row * l + t] = w;
                }
            }
        }
        let pool = tape.constant(&[b, b * l], pool);
        let pooled = pool.matmul(&tokens_2d)?; // [B, d]

        let logits = pooled.matmul(&leaves.head_w)?.add(&leaves.head_b)?;
        let probs = logits.softmax()?;

        Ok(EncodeOutput {
            token_embeddings,
            pooled,
            probs,
            leaves,
        })
    }
}

/// Flatten per-token embeddings into one row per non-padding token, each
/// labeled with its sentence's class. The result feeds the token-level
/// metric losses.
pub fn token_views_for_dml(
    token_embeddings: &Tensor,
    pad_mask: &[Vec<bool>],
    labels: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    let shape = token_embeddings.shape();
    if shape.len() != 3 || shape[0] != pad_mask.len() || labels.len() != pad_mask.len() {
        return Err(DiffError::ShapeMismatch {
            op: "token_views_for_dml",
            lhs: shape,
            rhs: vec![pad_mask.len(), labels.len()],
        }
        .into());
    }
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let mut keep = Vec::new();
    let mut flat_labels = Vec::new();
    for (row, mask) in pad_mask.iter().enumerate() {
        for (t, &m) in mask.iter().enumerate() {
            if m {
                keep.push(row * l + t);
                flat_labels.push(labels[row]);
            }
        }
    }
    let flat = token_embeddings
        .reshape(&[b * l, d])?
        .gather_rows(&keep)?;
    Ok((flat, flat_labels))
}

// ── checkpoint io ───────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    dim: usize,
    num_classes: usize,
    vocab_size: usize,
    max_len: usize,
    class_names: Vec<String>,
    objective: String,
    params: Vec<Parameter>,
    /// Class prototypes for objectives evaluated in embedding space:
    /// SoftTriple proxies `[C, k, d]`, ProxyNCA proxies `[C, d]`, or
    /// training-fold class centroids `[C, d]`.
    prototypes: Option<Parameter>,
}

/// Companion data stored with the model weights.
#[derive(Debug)]
pub struct CheckpointExtras {
    pub class_names: Vec<String>,
    pub objective: String,
    pub prototypes: Option<Parameter>,
}

pub fn save_checkpoint(model: &EncoderModel, extras: &CheckpointExtras, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        dim: model.dim,
        num_classes: model.num_classes,
        vocab_size: model.vocab_size,
        max_len: model.max_len,
        class_names: extras.class_names.clone(),
        objective: extras.objective.clone(),
        params: model.params().into_iter().cloned().collect(),
        prototypes: extras.prototypes.clone(),
    };
    let body = serde_json::to_string(&file).expect("checkpoint serialization cannot fail");
    std::fs::write(path, body).map_err(|source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderModel, CheckpointExtras)> {
    let body = std::fs::read_to_string(path).map_err(|source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: CheckpointFile =
        serde_json::from_str(&body).map_err(|e| EncoderError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    if file.version != CHECKPOINT_VERSION {
        return Err(EncoderError::Version {
            found: file.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut by_name: HashMap<String, Parameter> = file
        .params
        .into_iter()
        .map(|p| (p.name.clone(), p))
        .collect();
    let mut take = |name: &str, shape: Vec<usize>| -> Result<Parameter> {
        let p = by_name.remove(name).ok_or_else(|| EncoderError::Checkpoint {
            path: path.display().to_string(),
            message: format!("missing parameter block {name}"),
        })?;
        if p.shape != shape || p.numel() != shape.iter().product::<usize>() {
            return Err(EncoderError::Checkpoint {
                path: path.display().to_string(),
                message: format!("parameter {name} has shape {:?}, expected {shape:?}", p.shape),
            });
        }
        Ok(p)
    };
    let (v, d, c) = (file.vocab_size, file.dim, file.num_classes);
    let model = EncoderModel {
        dim: d,
        num_classes: c,
        vocab_size: v,
        max_len: file.max_len,
        embedding: take("embedding", vec![v, d])?,
        w1: take("w1", vec![d, d])?,
        b1: take("b1", vec![d])?,
        w2: take("w2", vec![d, d])?,
        b2: take("b2", vec![d])?,
        head_w: take("head_w", vec![d, c])?,
        head_b: take("head_b", vec![c])?,
    };
    Ok((
        model,
        CheckpointExtras {
            class_names: file.class_names,
            objective: file.objective,
            prototypes: file.prototypes,
        },
    ))
}

#[cfg(test)]
mod tests;
