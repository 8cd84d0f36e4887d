//! Python bindings for the tripledml toolkit: the metric-learning losses,
//! the tokenizer/vocabulary, dataset handling (fixtures, subsampling,
//! stratified k-fold), the learning-rate schedule, gradient checking, and
//! a small seeded training entry point.
//!
//! Loss functions take plain nested lists and return the loss value; the
//! heavy lifting (autodiff, training loops) stays in Rust.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use tripledml::data::fixtures::{generate, FixtureKind};
use tripledml::data::{self, Format, TextDataset};
use tripledml::diffcore::Tape;
use tripledml::encoder;
use tripledml::losses;
use tripledml::training::{
    self, derive_seed, seed_stream, Objective, RunConfig, Schedule, SoftTripleHyper,
    TrainSettings,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn matrix_on(tape: &Tape, rows: &[Vec<f64>], what: &str) -> PyResult<tripledml::Tensor> {
    let r = rows.len();
    if r == 0 {
        return Err(PyValueError::new_err(format!("{what}: empty matrix")));
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err(format!("{what}: ragged rows")));
    }
    Ok(tape.constant(&[r, c], rows.concat()))
}

fn proxies_on(tape: &Tape, proxies: &[Vec<Vec<f64>>]) -> PyResult<tripledml::Tensor> {
    let c = proxies.len();
    if c == 0 {
        return Err(PyValueError::new_err("proxies: no classes"));
    }
    let k = proxies[0].len();
    if k == 0 || proxies.iter().any(|p| p.len() != k) {
        return Err(PyValueError::new_err(
            "proxies: every class needs the same nonzero proxy count",
        ));
    }
    let d = proxies[0][0].len();
    let mut data = Vec::with_capacity(c * k * d);
    for class in proxies {
        for p in class {
            if p.len() != d {
                return Err(PyValueError::new_err("proxies: ragged dimensions"));
            }
            data.extend_from_slice(p);
        }
    }
    Ok(tape.constant(&[c, k, d], data))
}

/// Token-to-id vocabulary with [CLS]/[EOS]/[SEP]/[PAD]/[UNK] pinned first.
#[pyclass(name = "Vocabulary")]
struct PyVocabulary {
    inner: encoder::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Build from training texts; ids follow first-seen order.
    #[staticmethod]
    fn build(texts: Vec<String>) -> PyVocabulary {
        PyVocabulary {
            inner: encoder::Vocabulary::build(texts.iter().map(|s| s.as_str())),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn id(&self, token: &str) -> Option<usize> {
        self.inner.id(token)
    }

    fn token(&self, id: usize) -> Option<String> {
        self.inner.token(id).map(|s| s.to_string())
    }

    /// Token ids of one text (or a pair joined with [SEP]).
    #[pyo3(signature = (text, text2=None))]
    fn tokenize(&self, text: &str, text2: Option<&str>) -> Vec<usize> {
        match text2 {
            Some(second) => encoder::tokenize_pair(text, second, &self.inner),
            None => encoder::tokenize(text, &self.inner),
        }
    }
}

/// A labeled text-classification dataset.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: TextDataset,
}

#[pymethods]
impl PyDataset {
    /// Load csv/tsv/jsonl; format inferred from the extension unless given.
    #[staticmethod]
    #[pyo3(signature = (path, format=None))]
    fn load(path: &str, format: Option<&str>) -> PyResult<PyDataset> {
        let p = std::path::Path::new(path);
        let format = match format {
            Some(name) => name.parse::<Format>().map_err(value_err)?,
            None => Format::from_extension(p)
                .ok_or_else(|| PyValueError::new_err("cannot infer format; pass format="))?,
        };
        Ok(PyDataset {
            inner: data::load_dataset(p, format).map_err(value_err)?,
        })
    }

    /// Generate a synthetic fixture corpus ("sentiment2" or "topics6").
    #[staticmethod]
    fn fixture(kind: &str, n: usize, seed: u64) -> PyResult<PyDataset> {
        let kind = kind.parse::<FixtureKind>().map_err(value_err)?;
        Ok(PyDataset {
            inner: generate(kind, n, seed),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    #[getter]
    fn provenance(&self) -> String {
        self.inner.provenance.source.clone()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.records.iter().map(|r| r.label).collect()
    }

    fn texts(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.text.clone()).collect()
    }

    /// Stratified subsample of exactly n records.
    fn subsample(&self, n: usize, seed: u64) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: data::subsample(&self.inner, n, seed).map_err(value_err)?,
        })
    }

    /// Stratified k-fold split: list of (train_indices, val_indices).
    fn kfold(&self, k: usize, seed: u64) -> PyResult<Vec<(Vec<usize>, Vec<usize>)>> {
        let split = data::stratified_kfold(&self.inner, k, seed).map_err(value_err)?;
        Ok(split
            .folds
            .into_iter()
            .map(|f| (f.train, f.validation))
            .collect())
    }

    fn save(&self, path: &str, format: &str) -> PyResult<()> {
        let format = format.parse::<Format>().map_err(value_err)?;
        data::save_dataset(&self.inner, std::path::Path::new(path), format).map_err(value_err)
    }
}

/// Mean negative log-likelihood of one-hot labels under row-stochastic
/// probabilities.
#[pyfunction]
fn multinomial_cross_entropy(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let tape = Tape::new();
    let classes = probs.first().map(|r| r.len()).unwrap_or(0);
    let p = matrix_on(&tape, &probs, "probs")?;
    let targets = losses::one_hot(&tape, &labels, classes).map_err(value_err)?;
    losses::multinomial_cross_entropy(&p, &targets)
        .map_err(value_err)?
        .scalar_value()
        .map_err(runtime_err)
}

/// Contrastive pair loss; `similar=True` for same-class pairs.
#[pyfunction]
fn contrastive_loss(x1: Vec<f64>, x2: Vec<f64>, similar: bool, margin: f64) -> PyResult<f64> {
    let tape = Tape::new();
    let a = tape.constant(&[x1.len()], x1);
    let b = tape.constant(&[x2.len()], x2);
    let label = if similar {
        losses::PairLabel::Similar
    } else {
        losses::PairLabel::Dissimilar
    };
    let params = losses::ContrastiveParams::new(margin).map_err(value_err)?;
    losses::contrastive_loss(&a, &b, label, &params)
        .map_err(value_err)?
        .scalar_value()
        .map_err(runtime_err)
}

/// Single-triplet hinge loss.
#[pyfunction]
fn triplet_loss(
    anchor: Vec<f64>,
    positive: Vec<f64>,
    negative: Vec<f64>,
    alpha: f64,
) -> PyResult<f64> {
    let tape = Tape::new();
    let a = tape.constant(&[anchor.len()], anchor);
    let p = tape.constant(&[positive.len()], positive);
    let n = tape.constant(&[negative.len()], negative);
    let params = losses::TripletParams::new(alpha).map_err(value_err)?;
    losses::triplet_loss(&a, &p, &n, &params)
        .map_err(value_err)?
        .scalar_value()
        .map_err(runtime_err)
}

/// ProxyNCA loss of one example against per-class proxies `[C][d]`.
#[pyfunction]
fn proxy_nca_loss(x: Vec<f64>, label: usize, proxies: Vec<Vec<f64>>) -> PyResult<f64> {
    let tape = Tape::new();
    let e = tape.constant(&[x.len()], x);
    let z = matrix_on(&tape, &proxies, "proxies")?;
    let params = losses::ProxyNcaParams::new(z).map_err(value_err)?;
    losses::proxy_nca_loss(&e, label, &params)
        .map_err(value_err)?
        .scalar_value()
        .map_err(runtime_err)
}

/// Relaxed similarity of one embedding to one class's proxies `[C][k][d]`.
#[pyfunction]
fn soft_triple_similarity(
    embedding: Vec<f64>,
    class_id: usize,
    proxies: Vec<Vec<Vec<f64>>>,
    gamma: f64,
) -> PyResult<f64> {
    let tape = Tape::new();
    let e = tape.constant(&[embedding.len()], embedding);
    let w = proxies_on(&tape, &proxies)?;
    let params = losses::SoftTripleParams::new(w, gamma, 1.0, 0.0).map_err(value_err)?;
    losses::soft_triple_similarity(&e, class_id, &params)
        .map_err(value_err)?
        .scalar_value()
        .map_err(runtime_err)
}

/// SoftTriple loss over embeddings `[M][d]` with proxies `[C][k][d]`.
/// `lam` is the outlier-robustness scale.
#[pyfunction]
fn soft_triple_loss(
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    proxies: Vec<Vec<Vec<f64>>>,
    gamma: f64,
    lam: f64,
    delta: f64,
) -> PyResult<f64> {
    let tape = Tape::new();
    let e = matrix_on(&tape, &embeddings, "embeddings")?;
    let w = proxies_on(&tape, &proxies)?;
    let params = losses::SoftTripleParams::new(w, gamma, lam, delta).map_err(value_err)?;
    losses::soft_triple_loss(&e, &labels, &params)
        .map_err(value_err)?
        .scalar_value()
        .map_err(runtime_err)
}

/// The composite objective `beta * CE + (1 - beta) * SoftTriple`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn triple_entropy_loss(
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    token_embeddings: Vec<Vec<f64>>,
    token_labels: Vec<usize>,
    proxies: Vec<Vec<Vec<f64>>>,
    gamma: f64,
    lam: f64,
    delta: f64,
    beta: f64,
) -> PyResult<f64> {
    let tape = Tape::new();
    let classes = probs.first().map(|r| r.len()).unwrap_or(0);
    let p = matrix_on(&tape, &probs, "probs")?;
    let targets = losses::one_hot(&tape, &labels, classes).map_err(value_err)?;
    let e = matrix_on(&tape, &token_embeddings, "token_embeddings")?;
    let w = proxies_on(&tape, &proxies)?;
    let st = losses::SoftTripleParams::new(w, gamma, lam, delta).map_err(value_err)?;
    let params = losses::TripleEntropyParams::new(beta, st).map_err(value_err)?;
    losses::triple_entropy_loss(&p, &targets, &e, &token_labels, &params)
        .map_err(value_err)?
        .scalar_value()
        .map_err(runtime_err)
}

/// Check every loss's analytic gradient against central differences;
/// returns {loss name: max relative error}.
#[pyfunction]
#[pyo3(signature = (draws=10, step=1e-5, seed=7))]
fn gradcheck_losses(draws: usize, step: f64, seed: u64) -> PyResult<Vec<(String, f64)>> {
    tripledml::cli::gradcheck_table(draws, step, seed).map_err(runtime_err)
}

/// Learning rate at `step` of the linear warmup/decay schedule.
#[pyfunction]
#[pyo3(signature = (step, total_steps, base_lr=1e-5))]
fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> PyResult<f64> {
    training::lr_at(step, &Schedule::new(total_steps, base_lr)).map_err(value_err)
}

/// Derive the documented per-purpose sub-seed streams from a run seed.
#[pyfunction]
fn seed_streams(seed: u64) -> Vec<(String, u64)> {
    [
        ("model_init", seed_stream::MODEL_INIT),
        ("proxy_init", seed_stream::PROXY_INIT),
        ("epoch_shuffle", seed_stream::EPOCH_SHUFFLE),
        ("fold_split", seed_stream::FOLD_SPLIT),
        ("pair_sampling", seed_stream::PAIR_SAMPLING),
    ]
    .into_iter()
    .map(|(name, stream)| (name.to_string(), derive_seed(seed, stream)))
    .collect()
}

/// Train one model on fold 0 of a seeded stratified 5-fold split and
/// return (validation_accuracy, epochs_trained). Deterministic per seed.
#[pyfunction]
#[pyo3(signature = (
    dataset, loss="ce", beta=0.5, k=2, gamma=0.1, lam=3.0, delta=0.1,
    seed=2, epochs=5, batch_size=32, lr=0.05, dim=16
))]
#[allow(clippy::too_many_arguments)]
fn train_quick(
    dataset: &PyDataset,
    loss: &str,
    beta: f64,
    k: usize,
    gamma: f64,
    lam: f64,
    delta: f64,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    dim: usize,
) -> PyResult<(f64, usize)> {
    let hyper = SoftTripleHyper {
        k,
        gamma,
        lambda: lam,
        delta,
        beta,
    };
    let objective = match loss {
        "ce" => Objective::Ce,
        "tripleentropy" => Objective::TripleEntropy(hyper),
        "softtriple" => Objective::SoftTriple(hyper),
        "proxynca" => Objective::ProxyNca,
        "contrastive" => Objective::Contrastive { margin: 1.0 },
        "triplet" => Objective::Triplet { alpha: 0.5 },
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown loss {other:?}"
            )))
        }
    };
    let config = RunConfig {
        objective,
        settings: TrainSettings {
            lr,
            weight_decay: 0.01,
            dim,
            early_stop_patience: 3,
        },
        batch_size,
        epochs,
    };
    let split = data::stratified_kfold(
        &dataset.inner,
        5,
        derive_seed(seed, seed_stream::FOLD_SPLIT),
    )
    .map_err(value_err)?;
    let fold = &split.folds[0];
    let outcome = training::train_one(&config, seed, &fold.train, &fold.validation, &dataset.inner)
        .map_err(runtime_err)?;
    Ok((outcome.val_accuracy, outcome.epochs_trained))
}

#[pymodule]
fn tripledml_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(multinomial_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(proxy_nca_loss, m)?)?;
    m.add_function(wrap_pyfunction!(soft_triple_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(soft_triple_loss, m)?)?;
    m.add_function(wrap_pyfunction!(triple_entropy_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_losses, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(seed_streams, m)?)?;
    m.add_function(wrap_pyfunction!(train_quick, m)?)?;
    Ok(())
}
