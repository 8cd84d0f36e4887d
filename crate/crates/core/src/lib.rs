//! Deep metric learning for text classification at desk scale.
//!
//! The crate bundles:
//!
//! - [`diffcore`]: a small reverse-mode autodiff engine (f64, dynamic tape)
//!   with finite-difference gradient checking;
//! - [`losses`]: contrastive, triplet, ProxyNCA, SoftTriple, multinomial
//!   cross-entropy, and the composite TripleEntropy objective
//!   `beta * CE + (1 - beta) * SoftTriple`;
//! - [`encoder`]: a trainable tokenizer/embedding/feed-forward text encoder
//!   with a pooled classifier head and per-token embedding output;
//! - [`data`]: dataset loading (csv/tsv/jsonl), stratified subsampling and
//!   k-fold splitting, plus synthetic fixture corpora;
//! - [`training`]: AdamW with linear warmup/decay, seeded deterministic
//!   training runs, and a multi-seed k-fold grid search;
//! - [`reporting`]: run-record aggregation, baseline-vs-candidate gain
//!   tables, and json/csv/markdown emission;
//! - [`cli`]: the `tripledml` command-line entry point.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod encoder;
pub mod losses;
pub mod reporting;
pub mod training;

pub use diffcore::{grad_check, DiffError, Tape, Tensor};
