//! Dataset ingestion, label mapping, stratified subsampling, and
//! stratified k-fold splitting.
//!
//! Supported formats: csv/tsv with a header (`text[,text2],label`) and
//! jsonl (`{"text": ..., "text2"?: ..., "label": ...}`), all UTF-8.
//! Label strings map to dense ids in first-seen order. Datasets are
//! immutable after load and safe to share across parallel runs.

pub mod fixtures;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: empty dataset")]
    Empty { path: String },
    #[error("{path}: missing column {column}")]
    MissingColumn { path: String, column: String },
    #[error("{path}:{line}: {message}")]
    Row {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown label {label:?}")]
    UnknownLabel {
        path: String,
        line: usize,
        label: String,
    },
    #[error("{path}: records mix single texts and text pairs")]
    MixedPairing { path: String },
    #[error("subsample of {requested} exceeds dataset size {available}")]
    SubsampleTooLarge { requested: usize, available: usize },
    #[error("class {class:?} has {count} members, fewer than {folds} folds")]
    ClassSmallerThanFolds {
        class: String,
        count: usize,
        folds: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Tsv,
    Jsonl,
}

impl Format {
    pub fn from_extension(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()? {
            "csv" => Some(Format::Csv),
            "tsv" => Some(Format::Tsv),
            "jsonl" => Some(Format::Jsonl),
            _ => None,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Format> {
        match s {
            "csv" => Ok(Format::Csv),
            "tsv" => Ok(Format::Tsv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(DataError::Invalid(format!(
                "unknown format {other:?} (expected csv, tsv, or jsonl)"
            ))),
        }
    }
}

/// One labeled text (or text pair).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub text2: Option<String>,
    pub label: usize,
}

/// Where a dataset came from, including any subsampling applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub sampling: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TextDataset {
    pub records: Vec<Record>,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
}

impl TextDataset {
    pub fn new(
        records: Vec<Record>,
        class_names: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(DataError::Empty {
                path: provenance.source,
            });
        }
        let paired = records[0].text2.is_some();
        if records.iter().any(|r| r.text2.is_some() != paired) {
            return Err(DataError::MixedPairing {
                path: provenance.source,
            });
        }
        if let Some(bad) = records.iter().find(|r| r.label >= class_names.len()) {
            return Err(DataError::Invalid(format!(
                "record label {} outside {} classes",
                bad.label,
                class_names.len()
            )));
        }
        Ok(Self {
            records,
            class_names,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_pair_task(&self) -> bool {
        self.records.first().map(|r| r.text2.is_some()).unwrap_or(false)
    }

    /// Indices grouped by class, in record order.
    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes()];
        for (i, r) in self.records.iter().enumerate() {
            by_class[r.label].push(i);
        }
        by_class
    }
}

/// Maps label strings to dense ids, either first-seen (training) or
/// against a fixed closed set (evaluation).
enum LabelMap<'a> {
    FirstSeen {
        ids: HashMap<String, usize>,
        names: Vec<String>,
    },
    Closed(&'a [String]),
}

impl<'a> LabelMap<'a> {
    fn resolve(&mut self, label: &str, path: &str, line: usize) -> Result<usize> {
        match self {
            LabelMap::FirstSeen { ids, names } => Ok(*ids.entry(label.to_string()).or_insert_with(
                || {
                    names.push(label.to_string());
                    names.len() - 1
                },
            )),
            LabelMap::Closed(names) => names
                .iter()
                .position(|n| n == label)
                .ok_or_else(|| DataError::UnknownLabel {
                    path: path.to_string(),
                    line,
                    label: label.to_string(),
                }),
        }
    }

    fn into_names(self) -> Vec<String> {
        match self {
            LabelMap::FirstSeen { names, .. } => names,
            LabelMap::Closed(names) => names.to_vec(),
        }
    }
}

/// Load a dataset, assigning label ids in first-seen order.
pub fn load_dataset(path: &Path, format: Format) -> Result<TextDataset> {
    let map = LabelMap::FirstSeen {
        ids: HashMap::new(),
        names: Vec::new(),
    };
    load_with_map(path, format, map)
}

/// Load an evaluation dataset against an existing closed label set; an
/// unseen label is an error naming it.
pub fn load_dataset_with_classes(
    path: &Path,
    format: Format,
    class_names: &[String],
) -> Result<TextDataset> {
    load_with_map(path, format, LabelMap::Closed(class_names))
}

fn load_with_map(path: &Path, format: Format, mut map: LabelMap) -> Result<TextDataset> {
    let path_str = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path_str.clone(),
        source,
    })?;

    let mut records = Vec::new();
    match format {
        Format::Csv | Format::Tsv => {
            let delimiter = if format == Format::Csv { b',' } else { b'\t' };
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(delimiter)
                .flexible(false)
                .from_reader(raw.as_bytes());
            let headers = reader
                .headers()
                .map_err(|e| DataError::Row {
                    path: path_str.clone(),
                    line: 1,
                    message: e.to_string(),
                })?
                .clone();
            let col = |name: &str| headers.iter().position(|h| h == name);
            let text_col = col("text").ok_or_else(|| DataError::MissingColumn {
                path: path_str.clone(),
                column: "text".to_string(),
            })?;
            let label_col = col("label").ok_or_else(|| DataError::MissingColumn {
                path: path_str.clone(),
                column: "label".to_string(),
            })?;
            let text2_col = col("text2");

            for (i, row) in reader.records().enumerate() {
                let line = i + 2; // header is line 1
                let row = row.map_err(|e| DataError::Row {
                    path: path_str.clone(),
                    line,
                    message: e.to_string(),
                })?;
                let field = |idx: usize, name: &str| {
                    row.get(idx).map(|s| s.to_string()).ok_or_else(|| DataError::Row {
                        path: path_str.clone(),
                        line,
                        message: format!("missing field {name}"),
                    })
                };
                let text = field(text_col, "text")?;
                let label_str = field(label_col, "label")?;
                let text2 = match text2_col {
                    Some(c) => {
                        let v = field(c, "text2")?;
                        if v.is_empty() { None } else { Some(v) }
                    }
                    None => None,
                };
                let label = map.resolve(&label_str, &path_str, line)?;
                records.push(Record { text, text2, label });
            }
        }
        Format::Jsonl => {
            #[derive(Deserialize)]
            struct JsonRow {
                text: String,
                #[serde(default)]
                text2: Option<String>,
                label: serde_json::Value,
            }
            for (i, raw_line) in raw.lines().enumerate() {
                let line = i + 1;
                if raw_line.trim().is_empty() {
                    continue;
                }
                let row: JsonRow =
                    serde_json::from_str(raw_line).map_err(|e| DataError::Row {
                        path: path_str.clone(),
                        line,
                        message: e.to_string(),
                    })?;
                let label_str = match &row.label {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Number(n) => n.to_string(),
                    other => {
                        return Err(DataError::Row {
                            path: path_str.clone(),
                            line,
                            message: format!("label must be a string or number, got {other}"),
                        })
                    }
                };
                let label = map.resolve(&label_str, &path_str, line)?;
                records.push(Record {
                    text: row.text,
                    text2: row.text2,
                    label,
                });
            }
        }
    }

    let class_names = map.into_names();
    TextDataset::new(
        records,
        class_names,
        Provenance {
            source: path_str,
            sampling: None,
        },
    )
}

/// Write a dataset back out in any supported format; `load` of the result
/// round-trips record-for-record.
pub fn save_dataset(ds: &TextDataset, path: &Path, format: Format) -> Result<()> {
    let path_str = path.display().to_string();
    let io_err = |source| DataError::Io {
        path: path_str.clone(),
        source,
    };
    let pair = ds.is_pair_task();
    let mut out = String::new();
    match format {
        Format::Csv | Format::Tsv => {
            let delimiter = if format == Format::Csv { b',' } else { b'\t' };
            let mut writer = csv::WriterBuilder::new()
                .delimiter(delimiter)
                .from_writer(Vec::new());
            let header: Vec<&str> = if pair {
                vec!["text", "text2", "label"]
            } else {
                vec!["text", "label"]
            };
            writer.write_record(&header).map_err(csv_io)?;
            for r in &ds.records {
                let label = ds.class_names[r.label].as_str();
                let row: Vec<&str> = if pair {
                    vec![&r.text, r.text2.as_deref().unwrap_or(""), label]
                } else {
                    vec![&r.text, label]
                };
                writer.write_record(&row).map_err(csv_io)?;
            }
            out = String::from_utf8(writer.into_inner().map_err(|e| {
                DataError::Invalid(format!("csv flush failed: {e}"))
            })?)
            .expect("csv output is utf-8");
        }
        Format::Jsonl => {
            for r in &ds.records {
                let mut obj = serde_json::Map::new();
                obj.insert("text".to_string(), r.text.clone().into());
                if let Some(t2) = &r.text2 {
                    obj.insert("text2".to_string(), t2.clone().into());
                }
                obj.insert(
                    "label".to_string(),
                    ds.class_names[r.label].clone().into(),
                );
                out.push_str(&serde_json::Value::Object(obj).to_string());
                out.push('\n');
            }
        }
    }
    std::fs::write(path, out).map_err(io_err)
}

fn csv_io(e: csv::Error) -> DataError {
    DataError::Invalid(format!("csv write failed: {e}"))
}

/// In-place Fisher-Yates shuffle driven by the given rng. Kept local so
/// shuffling behavior is pinned to this crate.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Stratified subsample of exactly `n` records, deterministic for a fixed
/// seed. Per-class quotas follow largest-remainder rounding, so class
/// proportions are preserved within one record.
pub fn subsample(ds: &TextDataset, n: usize, seed: u64) -> Result<TextDataset> {
    if n > ds.len() {
        return Err(DataError::SubsampleTooLarge {
            requested: n,
            available: ds.len(),
        });
    }
    if n == 0 {
        return Err(DataError::Invalid("subsample of 0 records".to_string()));
    }
    let by_class = ds.indices_by_class();
    let total = ds.len() as f64;

    // Largest-remainder quotas: floor first, then hand out the leftovers
    // by descending fractional part (ties to the smaller class id).
    let exact: Vec<f64> = by_class
        .iter()
        .map(|idx| n as f64 * idx.len() as f64 / total)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|&q| q.floor() as usize).collect();
    let mut leftover = n - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in &order {
        if leftover == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            leftover -= 1;
        }
    }
    // Classes capped at their size can leave a remainder; spread it over
    // whichever classes still have room, in id order.
    let mut c = 0;
    while leftover > 0 {
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            leftover -= 1;
        }
        c = (c + 1) % quota.len();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (c, indices) in by_class.iter().enumerate() {
        let mut pool = indices.clone();
        shuffle(&mut pool, &mut rng);
        chosen.extend(pool.into_iter().take(quota[c]));
    }
    chosen.sort_unstable();

    let records = chosen.iter().map(|&i| ds.records[i].clone()).collect();
    TextDataset::new(
        records,
        ds.class_names.clone(),
        Provenance {
            source: ds.provenance.source.clone(),
            sampling: Some(match &ds.provenance.sampling {
                Some(prev) => format!("{prev} -> subsample(n={n}, seed={seed})"),
                None => format!("subsample(n={n}, seed={seed})"),
            }),
        },
    )
}

/// One train/validation split per fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// A stratified k-fold partition: validation folds are pairwise disjoint,
/// cover every index, and hold per-class counts that differ by at most
/// one across folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_count: usize,
    pub folds: Vec<Fold>,
}

pub fn stratified_kfold(ds: &TextDataset, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(DataError::Invalid(format!("fold count must be >= 2, got {k}")));
    }
    let by_class = ds.indices_by_class();
    for (c, indices) in by_class.iter().enumerate() {
        if indices.len() < k {
            return Err(DataError::ClassSmallerThanFolds {
                class: ds.class_names[c].clone(),
                count: indices.len(),
                folds: k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut validation: Vec<Vec<usize>> = vec![Vec::new(); k];
    for indices in by_class {
        let mut pool = indices;
        shuffle(&mut pool, &mut rng);
        for (j, idx) in pool.into_iter().enumerate() {
            validation[j % k].push(idx);
        }
    }
    let folds = validation
        .into_iter()
        .map(|mut val| {
            val.sort_unstable();
            let in_val: std::collections::HashSet<usize> = val.iter().copied().collect();
            let train = (0..ds.len()).filter(|i| !in_val.contains(i)).collect();
            Fold {
                train,
                validation: val,
            }
        })
        .collect();
    Ok(FoldSplit {
        fold_count: k,
        folds,
    })
}
