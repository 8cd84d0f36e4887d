use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_close(actual: f64, expected: f64, tol: f64) {
    assert!(
        (actual - expected).abs() <= tol,
        "expected {expected}, got {actual} (tol {tol})"
    );
}

fn meta(dataset: &str, size: usize) -> ReportMeta {
    ReportMeta {
        dataset: dataset.to_string(),
        sampling: None,
        dataset_size: size,
        size_bucket: SizeBucket::for_size(size),
        seeds: vec![2, 16, 128, 2048],
        fold_count: 5,
        batch_size: 64,
        epochs: 10,
    }
}

fn record(config_id: usize, seed: u64, fold: usize, acc: f64) -> RunRecord {
    RunRecord {
        config_id,
        config: format!("config-{config_id}"),
        seed,
        fold,
        val_accuracy: acc,
        epochs_trained: 10,
        wall_time_secs: 1.25,
    }
}

#[test]
fn aggregate_of_identical_accuracies_has_zero_std() {
    let records: Vec<RunRecord> = (0..20).map(|i| record(0, i as u64, i % 5, 0.87)).collect();
    let aggs = aggregate(&records).unwrap();
    assert_eq!(aggs.len(), 1);
    assert_close(aggs[0].mean, 0.87, 1e-15);
    assert_eq!(aggs[0].std, 0.0);
    assert_eq!(aggs[0].n, 20);
}

#[test]
fn aggregate_of_zero_and_one_has_mean_half() {
    let records = vec![record(0, 2, 0, 0.0), record(0, 2, 1, 1.0)];
    let aggs = aggregate(&records).unwrap();
    assert_close(aggs[0].mean, 0.5, 1e-15);
}

#[test]
fn aggregate_matches_brute_force_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let accs: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
    let records: Vec<RunRecord> = accs
        .iter()
        .enumerate()
        .map(|(i, &a)| record(0, (i / 5) as u64, i % 5, a))
        .collect();
    let aggs = aggregate(&records).unwrap();
    let brute = accs.iter().sum::<f64>() / 20.0;
    assert_close(aggs[0].mean, brute, 1e-12);
}

#[test]
fn aggregate_rejects_empty_input() {
    assert!(matches!(aggregate(&[]).unwrap_err(), ReportError::EmptyRecords));
}

#[test]
fn compare_of_identical_reports_is_zero() {
    let records: Vec<RunRecord> = (0..20).map(|i| record(0, i as u64, i % 5, 0.91)).collect();
    let report = RunReport::build(meta("sst2-1k", 1000), records).unwrap();
    let table = compare(&report, &report).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].gain_pp, 0.0);
    assert_eq!(table.bucket_gains, vec![(SizeBucket::Small, 0.0)]);
}

#[test]
fn compare_reproduces_published_small_dataset_gain() {
    // Published small-dataset sentiment pair: 88.63 baseline, 89.09
    // candidate, a +0.46 pp gain.
    let baseline = RunReport::from_published("SST2-1k", 1000, "baseline", 88.63);
    let candidate = RunReport::from_published("SST2-1k", 1000, "candidate", 89.09);
    let table = compare(&baseline, &candidate).unwrap();
    assert_close(table.rows[0].gain_pp, 0.46, 1e-9);
    assert_eq!(table.rows[0].size_bucket, SizeBucket::Small);
}

#[test]
fn compare_reproduces_published_medium_dataset_gain() {
    // Published paraphrase-detection pair: 83.11 baseline, 84.39
    // candidate, a +1.28 pp gain on a 4k-sentence corpus.
    let baseline = RunReport::from_published("MRPC", 4000, "baseline", 83.11);
    let candidate = RunReport::from_published("MRPC", 4000, "candidate", 84.39);
    let table = compare(&baseline, &candidate).unwrap();
    assert_close(table.rows[0].gain_pp, 1.28, 1e-9);
    assert_eq!(table.rows[0].size_bucket, SizeBucket::Medium);
}

#[test]
fn compare_rejects_mismatched_metadata() {
    let a = RunReport::from_published("SST2-1k", 1000, "baseline", 88.63);
    let b = RunReport::from_published("MRPC", 4000, "candidate", 84.39);
    assert!(matches!(
        compare(&a, &b).unwrap_err(),
        ReportError::MetadataMismatch(_)
    ));
}

#[test]
fn bucket_assignment_follows_the_published_thresholds() {
    assert_eq!(SizeBucket::for_size(200), SizeBucket::Small);
    assert_eq!(SizeBucket::for_size(1000), SizeBucket::Small);
    assert_eq!(SizeBucket::for_size(2000), SizeBucket::Unbucketed);
    assert_eq!(SizeBucket::for_size(4000), SizeBucket::Medium);
    assert_eq!(SizeBucket::for_size(5000), SizeBucket::Medium);
    assert_eq!(SizeBucket::for_size(7000), SizeBucket::Unbucketed);
    assert_eq!(SizeBucket::for_size(10000), SizeBucket::Large);
    assert_eq!(SizeBucket::for_size(11000), SizeBucket::Large);
    assert_eq!(SizeBucket::for_size(50000), SizeBucket::ExtraLarge);
    assert_eq!(SizeBucket::for_size(67000), SizeBucket::ExtraLarge);
}

#[test]
fn json_emit_is_byte_stable_through_a_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let records: Vec<RunRecord> = (0..8)
        .map(|i| record(i % 2, (i / 2) as u64, i % 2, rng.random_range(0.0..1.0)))
        .collect();
    let report = RunReport::build(meta("fixture", 40), records).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    emit(&report, EmitFormat::Json, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = load_report(&path).unwrap();
    assert_eq!(loaded, report);
    emit(&loaded, EmitFormat::Json, &path).unwrap();
    let second = std::fs::read(&path).unwrap();
    assert_eq!(first, second);
}

#[test]
fn csv_emit_is_byte_stable_through_a_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let records: Vec<RunRecord> = (0..6)
        .map(|i| {
            let mut r = record(0, i as u64, i % 3, rng.random_range(0.0..1.0));
            // Commas in the config string exercise csv quoting.
            r.config = "tripleentropy(k=2, gamma=0.1, beta=0.5)".to_string();
            r
        })
        .collect();
    let report = RunReport::build(meta("fixture", 40), records).unwrap();

    let first = render(&report, EmitFormat::Csv);
    let parsed = parse_records_csv(&first).unwrap();
    assert_eq!(parsed, report.records);
    let second = render(
        &RunReport::build(meta("fixture", 40), parsed).unwrap(),
        EmitFormat::Csv,
    );
    assert_eq!(first, second);
}

#[test]
fn markdown_renders_the_comparison_layout() {
    let baseline = RunReport::from_published("SST2-1k", 1000, "baseline", 88.63);
    let candidate = RunReport::from_published("SST2-1k", 1000, "candidate", 89.09);
    let table = compare(&baseline, &candidate).unwrap();
    let md = render_gains_markdown(&table, "baseline", "with-metric-loss");
    assert!(md.contains("| Model | SST2-1k |"));
    assert!(md.contains("| baseline | 88.63 |"));
    assert!(md.contains("| with-metric-loss | 89.09 |"));
    assert!(md.contains("| gain (pp) | +0.46 |"));
    assert!(md.contains("average gain, small: +0.46 pp"));
}

#[test]
fn best_config_breaks_ties_toward_the_lowest_id() {
    let records = vec![
        record(0, 2, 0, 0.9),
        record(0, 2, 1, 0.9),
        record(1, 2, 0, 0.9),
        record(1, 2, 1, 0.9),
        record(2, 2, 0, 0.8),
        record(2, 2, 1, 0.8),
    ];
    let report = RunReport::build(meta("fixture", 40), records).unwrap();
    assert_eq!(report.best_aggregate().unwrap().config_id, 0);
}

#[test]
fn gain_table_averages_per_bucket() {
    let rows = vec![
        GainRow {
            dataset: "a-1k".into(),
            size_bucket: SizeBucket::Small,
            baseline_pct: 80.0,
            candidate_pct: 81.0,
            gain_pp: 1.0,
        },
        GainRow {
            dataset: "b-1k".into(),
            size_bucket: SizeBucket::Small,
            baseline_pct: 90.0,
            candidate_pct: 90.5,
            gain_pp: 0.5,
        },
        GainRow {
            dataset: "c".into(),
            size_bucket: SizeBucket::Medium,
            baseline_pct: 85.0,
            candidate_pct: 85.2,
            gain_pp: 0.2,
        },
    ];
    let table = gain_table(rows);
    assert_eq!(table.bucket_gains.len(), 2);
    assert_close(table.bucket_gains[0].1, 0.75, 1e-12);
    assert_close(table.bucket_gains[1].1, 0.2, 1e-12);
}
