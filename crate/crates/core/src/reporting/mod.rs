//! Run-record aggregation and report emission.
//!
//! A [`RunReport`] collects one record per `(config, seed, fold)` run,
//! per-config mean/std aggregates, and dataset metadata. Reports emit as
//! versioned json (the canonical format, byte-stable through a
//! load/emit round trip), flat csv, or markdown tables. [`compare`]
//! produces baseline-vs-candidate gain tables in percentage points.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const REPORT_VERSION: u32 = 1;

/// Fixed column order of the csv emission.
pub const CSV_HEADER: [&str; 7] = [
    "config_id",
    "config",
    "seed",
    "fold",
    "val_accuracy",
    "epochs_trained",
    "wall_time_secs",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot aggregate zero records")]
    EmptyRecords,
    #[error("report {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unsupported report version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("metadata mismatch between reports: {0}")]
    MetadataMismatch(String),
}

type Result<T> = std::result::Result<T, ReportError>;

/// Dataset-size groups used when comparing gains across corpora.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
    ExtraLarge,
    /// Sizes falling between the named ranges.
    Unbucketed,
}

impl SizeBucket {
    /// Small up to 1k sentences, medium 4k-5k, large 10k-11k, extra-large
    /// from 50k; anything in between is unbucketed.
    pub fn for_size(n: usize) -> SizeBucket {
        match n {
            0..=1000 => SizeBucket::Small,
            4000..=5000 => SizeBucket::Medium,
            10000..=11000 => SizeBucket::Large,
            n if n >= 50000 => SizeBucket::ExtraLarge,
            _ => SizeBucket::Unbucketed,
        }
    }
}

impl std::fmt::Display for SizeBucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
            SizeBucket::ExtraLarge => "extra-large",
            SizeBucket::Unbucketed => "unbucketed",
        };
        write!(f, "{name}")
    }
}

/// One completed training run. Accuracies are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_id: usize,
    pub config: String,
    pub seed: u64,
    pub fold: usize,
    pub val_accuracy: f64,
    pub epochs_trained: usize,
    pub wall_time_secs: f64,
}

/// Mean and sample standard deviation of one configuration's runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigAggregate {
    pub config_id: usize,
    pub config: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Dataset and protocol identity; [`compare`] requires both to match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub sampling: Option<String>,
    pub dataset_size: usize,
    pub size_bucket: SizeBucket,
    pub seeds: Vec<u64>,
    pub fold_count: usize,
    pub batch_size: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub metadata: ReportMeta,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<ConfigAggregate>,
    /// Index into `aggregates` of the best configuration (highest mean,
    /// ties to the lowest config id).
    pub best: Option<usize>,
}

impl RunReport {
    /// Aggregate records under the given metadata. Records are kept in
    /// `(config_id, seed order, fold)` order so the report is independent
    /// of completion order.
    pub fn build(metadata: ReportMeta, mut records: Vec<RunRecord>) -> Result<RunReport> {
        let seed_position = |s: u64| {
            metadata
                .seeds
                .iter()
                .position(|&x| x == s)
                .unwrap_or(usize::MAX)
        };
        records.sort_by_key(|r| (r.config_id, seed_position(r.seed), r.fold));
        let aggregates = aggregate(&records)?;
        let best = best_index(&aggregates);
        Ok(RunReport {
            version: REPORT_VERSION,
            metadata,
            records,
            aggregates,
            best,
        })
    }

    /// A summary-only report carrying a published accuracy (percent) with
    /// no raw records, for reproducing published gain arithmetic.
    pub fn from_published(dataset: &str, size: usize, label: &str, accuracy_percent: f64) -> RunReport {
        RunReport {
            version: REPORT_VERSION,
            metadata: ReportMeta {
                dataset: dataset.to_string(),
                sampling: None,
                dataset_size: size,
                size_bucket: SizeBucket::for_size(size),
                seeds: vec![2, 16, 128, 2048],
                fold_count: 5,
                batch_size: 64,
                epochs: 0,
            },
            records: Vec::new(),
            aggregates: vec![ConfigAggregate {
                config_id: 0,
                config: label.to_string(),
                mean: accuracy_percent / 100.0,
                std: 0.0,
                n: 0,
            }],
            best: Some(0),
        }
    }

    pub fn best_aggregate(&self) -> Option<&ConfigAggregate> {
        self.best.map(|i| &self.aggregates[i])
    }
}

/// Per-config arithmetic mean and sample standard deviation.
pub fn aggregate(records: &[RunRecord]) -> Result<Vec<ConfigAggregate>> {
    if records.is_empty() {
        return Err(ReportError::EmptyRecords);
    }
    let mut ids: Vec<usize> = records.iter().map(|r| r.config_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let accs: Vec<f64> = records
            .iter()
            .filter(|r| r.config_id == id)
            .map(|r| r.val_accuracy)
            .collect();
        let n = accs.len();
        // Bit-identical runs aggregate exactly: no summation rounding.
        let all_equal = accs.windows(2).all(|w| w[0] == w[1]);
        let mean = if all_equal {
            accs[0]
        } else {
            accs.iter().sum::<f64>() / n as f64
        };
        let std = if n > 1 && !all_equal {
            (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let config = records
            .iter()
            .find(|r| r.config_id == id)
            .map(|r| r.config.clone())
            .unwrap();
        out.push(ConfigAggregate {
            config_id: id,
            config,
            mean,
            std,
            n,
        });
    }
    Ok(out)
}

/// Highest mean wins; ties break to the lowest config id, which is the
/// lexicographically smallest hyperparameter tuple under the grid's
/// enumeration order.
fn best_index(aggregates: &[ConfigAggregate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, agg) in aggregates.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if agg.mean > aggregates[b].mean => best = Some(i),
            _ => {}
        }
    }
    best
}

/// One dataset row of a gain table. Accuracies render as percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub dataset: String,
    pub size_bucket: SizeBucket,
    pub baseline_pct: f64,
    pub candidate_pct: f64,
    /// Candidate minus baseline, in percentage points.
    pub gain_pp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    pub rows: Vec<GainRow>,
    /// Average gain per size bucket, in bucket declaration order.
    pub bucket_gains: Vec<(SizeBucket, f64)>,
}

/// Gain of `candidate` over `baseline` on one dataset, using each
/// report's best configuration. The two reports must describe the same
/// dataset and protocol.
pub fn compare(baseline: &RunReport, candidate: &RunReport) -> Result<GainTable> {
    let b = &baseline.metadata;
    let c = &candidate.metadata;
    if b.dataset != c.dataset || b.sampling != c.sampling || b.dataset_size != c.dataset_size {
        return Err(ReportError::MetadataMismatch(format!(
            "dataset {:?}/{:?} vs {:?}/{:?}",
            b.dataset, b.sampling, c.dataset, c.sampling
        )));
    }
    if b.seeds != c.seeds || b.fold_count != c.fold_count {
        return Err(ReportError::MetadataMismatch(format!(
            "protocol {:?}x{} vs {:?}x{}",
            b.seeds, b.fold_count, c.seeds, c.fold_count
        )));
    }
    let base = baseline
        .best_aggregate()
        .ok_or(ReportError::EmptyRecords)?;
    let cand = candidate
        .best_aggregate()
        .ok_or(ReportError::EmptyRecords)?;
    let row = GainRow {
        dataset: b.dataset.clone(),
        size_bucket: b.size_bucket,
        baseline_pct: base.mean * 100.0,
        candidate_pct: cand.mean * 100.0,
        gain_pp: (cand.mean - base.mean) * 100.0,
    };
    Ok(gain_table(vec![row]))
}

/// Merge per-dataset gain rows into one table with bucket averages.
pub fn gain_table(rows: Vec<GainRow>) -> GainTable {
    let order = [
        SizeBucket::Small,
        SizeBucket::Medium,
        SizeBucket::Large,
        SizeBucket::ExtraLarge,
        SizeBucket::Unbucketed,
    ];
    let mut bucket_gains = Vec::new();
    for bucket in order {
        let gains: Vec<f64> = rows
            .iter()
            .filter(|r| r.size_bucket == bucket)
            .map(|r| r.gain_pp)
            .collect();
        if !gains.is_empty() {
            bucket_gains.push((bucket, gains.iter().sum::<f64>() / gains.len() as f64));
        }
    }
    GainTable { rows, bucket_gains }
}

/// Compare several dataset pairs at once; pairs are matched by position.
pub fn compare_many(pairs: &[(&RunReport, &RunReport)]) -> Result<GainTable> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (b, c) in pairs {
        rows.extend(compare(b, c)?.rows);
    }
    Ok(gain_table(rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmitFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for EmitFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "json" => Ok(EmitFormat::Json),
            "csv" => Ok(EmitFormat::Csv),
            "markdown" | "md" => Ok(EmitFormat::Markdown),
            other => Err(format!(
                "unknown format {other:?} (expected json, csv, or markdown)"
            )),
        }
    }
}

/// Render a report in the given format. Field order is fixed, so emitting
/// a loaded report reproduces the original bytes for json and csv.
pub fn render(report: &RunReport, format: EmitFormat) -> String {
    match format {
        EmitFormat::Json => {
            serde_json::to_string_pretty(report).expect("report serialization cannot fail") + "\n"
        }
        EmitFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer.write_record(CSV_HEADER).expect("csv header");
            for r in &report.records {
                writer
                    .write_record([
                        r.config_id.to_string(),
                        r.config.clone(),
                        r.seed.to_string(),
                        r.fold.to_string(),
                        r.val_accuracy.to_string(),
                        r.epochs_trained.to_string(),
                        r.wall_time_secs.to_string(),
                    ])
                    .expect("csv record");
            }
            String::from_utf8(writer.into_inner().expect("csv flush")).expect("csv is utf-8")
        }
        EmitFormat::Markdown => {
            let mut out = String::new();
            out.push_str(&format!(
                "## {} ({} records, bucket: {})\n\n",
                report.metadata.dataset,
                report.records.len(),
                report.metadata.size_bucket
            ));
            out.push_str("| config | mean acc (%) | std (pp) | n |\n");
            out.push_str("|---|---|---|---|\n");
            for agg in &report.aggregates {
                let marker = if report
                    .best_aggregate()
                    .is_some_and(|b| b.config_id == agg.config_id)
                {
                    " *"
                } else {
                    ""
                };
                out.push_str(&format!(
                    "| {}{} | {:.2} | {:.2} | {} |\n",
                    agg.config,
                    marker,
                    agg.mean * 100.0,
                    agg.std * 100.0,
                    agg.n
                ));
            }
            out
        }
    }
}

/// Two-row comparison table in the layout of the published results:
/// one column per dataset, baseline and candidate rows, then gains.
pub fn render_gains_markdown(table: &GainTable, baseline_name: &str, candidate_name: &str) -> String {
    let mut out = String::new();
    out.push_str("| Model |");
    for row in &table.rows {
        out.push_str(&format!(" {} |", row.dataset));
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in &table.rows {
        out.push_str("---|");
    }
    out.push('\n');
    out.push_str(&format!("| {baseline_name} |"));
    for row in &table.rows {
        out.push_str(&format!(" {:.2} |", row.baseline_pct));
    }
    out.push('\n');
    out.push_str(&format!("| {candidate_name} |"));
    for row in &table.rows {
        out.push_str(&format!(" {:.2} |", row.candidate_pct));
    }
    out.push('\n');
    out.push_str("| gain (pp) |");
    for row in &table.rows {
        out.push_str(&format!(" {:+.2} |", row.gain_pp));
    }
    out.push('\n');
    if !table.bucket_gains.is_empty() {
        out.push('\n');
        for (bucket, gain) in &table.bucket_gains {
            out.push_str(&format!("- average gain, {bucket}: {gain:+.2} pp\n"));
        }
    }
    out
}

/// Write a report to `path` in the given format.
pub fn emit(report: &RunReport, format: EmitFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render(report, format)).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load a json report produced by [`emit`].
pub fn load_report(path: &Path) -> Result<RunReport> {
    let body = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let report: RunReport = serde_json::from_str(&body).map_err(|e| ReportError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if report.version != REPORT_VERSION {
        return Err(ReportError::Version {
            found: report.version,
            expected: REPORT_VERSION,
        });
    }
    Ok(report)
}

/// Parse records back out of the csv emission.
pub fn parse_records_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| ReportError::Parse {
            path: "<csv>".to_string(),
            message: format!("line {}: {e}", i + 2),
        })?;
        let field = |idx: usize| -> Result<&str> {
            row.get(idx).ok_or_else(|| ReportError::Parse {
                path: "<csv>".to_string(),
                message: format!("line {}: missing column {idx}", i + 2),
            })
        };
        let parse_err = |what: &str| ReportError::Parse {
            path: "<csv>".to_string(),
            message: format!("line {}: cannot parse {what}", i + 2),
        };
        out.push(RunRecord {
            config_id: field(0)?.parse().map_err(|_| parse_err("config_id"))?,
            config: field(1)?.to_string(),
            seed: field(2)?.parse().map_err(|_| parse_err("seed"))?,
            fold: field(3)?.parse().map_err(|_| parse_err("fold"))?,
            val_accuracy: field(4)?.parse().map_err(|_| parse_err("val_accuracy"))?,
            epochs_trained: field(5)?.parse().map_err(|_| parse_err("epochs_trained"))?,
            wall_time_secs: field(6)?.parse().map_err(|_| parse_err("wall_time_secs"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
