use super::*;
use crate::losses::{one_hot, soft_triple_loss, triple_entropy_loss, SoftTripleParams, TripleEntropyParams};
use rand::SeedableRng;

fn vocab_for(texts: &[&str]) -> Vocabulary {
    Vocabulary::build(texts.iter().copied())
}

#[test]
fn empty_text_tokenizes_to_cls_eos() {
    let vocab = vocab_for(&["irrelevant"]);
    assert_eq!(tokenize("", &vocab), vec![CLS_ID, EOS_ID]);
}

#[test]
fn repeated_words_are_preserved() {
    let vocab = vocab_for(&["good"]);
    let good = vocab.id("good").unwrap();
    assert_eq!(
        tokenize("good good", &vocab),
        vec![CLS_ID, good, good, EOS_ID]
    );
}

#[test]
fn unseen_words_map_to_unk() {
    let vocab = vocab_for(&["known"]);
    let known = vocab.id("known").unwrap();
    assert_eq!(
        tokenize("known martian", &vocab),
        vec![CLS_ID, known, UNK_ID, EOS_ID]
    );
}

#[test]
fn pairs_join_with_sep() {
    let vocab = vocab_for(&["left right"]);
    let l = vocab.id("left").unwrap();
    let r = vocab.id("right").unwrap();
    assert_eq!(
        tokenize_pair("left", "right", &vocab),
        vec![CLS_ID, l, SEP_ID, r, EOS_ID]
    );
}

#[test]
fn long_input_truncates_to_max_len_keeping_eos() {
    let vocab = vocab_for(&["word"]);
    let text = vec!["word"; 600].join(" ");
    let ids = tokenize(&text, &vocab);
    assert_eq!(ids.len(), MAX_LEN);
    assert_eq!(ids[0], CLS_ID);
    assert_eq!(*ids.last().unwrap(), EOS_ID);
}

#[test]
fn tokenizer_lowercases_and_splits_punctuation() {
    let vocab = vocab_for(&["good movie"]);
    let good = vocab.id("good").unwrap();
    let movie = vocab.id("movie").unwrap();
    assert_eq!(
        tokenize("Good, movie!", &vocab),
        vec![CLS_ID, good, movie, EOS_ID]
    );
}

#[test]
fn vocab_file_round_trips_with_specials_first() {
    let vocab = vocab_for(&["alpha beta", "gamma"]);
    let f = tempfile::NamedTempFile::new().unwrap();
    vocab.save(f.path()).unwrap();
    let back = Vocabulary::load(f.path()).unwrap();
    assert_eq!(back.len(), vocab.len());
    assert_eq!(back.id("[PAD]"), Some(PAD_ID));
    assert_eq!(back.id("alpha"), vocab.id("alpha"));

    let bad = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(bad.path(), "alpha\nbeta\n").unwrap();
    assert!(Vocabulary::load(bad.path()).is_err());
}

fn tiny_model(vocab_size: usize) -> EncoderModel {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    EncoderModel::init(vocab_size, 4, 2, &mut rng)
}

#[test]
fn single_token_row_pools_to_that_token_embedding() {
    let model = tiny_model(8);
    let batch = Batch {
        token_ids: vec![vec![5]],
        pad_mask: vec![vec![true]],
        labels: vec![0],
    };
    let tape = Tape::new();
    let out = model.encode(&batch, &tape).unwrap();
    assert_eq!(out.pooled.data(), out.token_embeddings.data());
}

#[test]
fn identical_sentences_produce_identical_rows() {
    let vocab = vocab_for(&["same sentence twice"]);
    let records = [
        Record { text: "same sentence twice".into(), text2: None, label: 0 },
        Record { text: "same sentence twice".into(), text2: None, label: 0 },
    ];
    let refs: Vec<&Record> = records.iter().collect();
    let batch = Batch::from_records(&refs, &vocab);
    let model = tiny_model(vocab.len());
    let tape = Tape::new();
    let out = model.encode(&batch, &tape).unwrap();

    let check_rows_equal = |t: &crate::diffcore::Tensor| {
        let data = t.data();
        let half = data.len() / 2;
        assert_eq!(data[..half], data[half..]);
    };
    check_rows_equal(&out.token_embeddings);
    check_rows_equal(&out.pooled);
    check_rows_equal(&out.probs);
}

#[test]
fn probability_rows_sum_to_one() {
    let ds = crate::data::fixtures::generate(crate::data::fixtures::FixtureKind::Sentiment2, 8, 3);
    let vocab = Vocabulary::build(ds.records.iter().map(|r| r.text.as_str()));
    let refs: Vec<&Record> = ds.records.iter().collect();
    let batch = Batch::from_records(&refs, &vocab);
    let model = tiny_model(vocab.len());
    let tape = Tape::new();
    let out = model.encode(&batch, &tape).unwrap();
    let probs = out.probs.data();
    for row in probs.chunks(2) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn encode_is_deterministic() {
    let vocab = vocab_for(&["stable output text"]);
    let records = [Record { text: "stable output text".into(), text2: None, label: 1 }];
    let refs: Vec<&Record> = records.iter().collect();
    let batch = Batch::from_records(&refs, &vocab);
    let model = tiny_model(vocab.len());
    let run = || {
        let tape = Tape::new();
        let out = model.encode(&batch, &tape).unwrap();
        (out.token_embeddings.data(), out.pooled.data(), out.probs.data())
    };
    assert_eq!(run(), run());
}

#[test]
fn encode_rejects_out_of_range_ids() {
    let model = tiny_model(4);
    let batch = Batch {
        token_ids: vec![vec![9]],
        pad_mask: vec![vec![true]],
        labels: vec![0],
    };
    let tape = Tape::new();
    assert!(matches!(
        model.encode(&batch, &tape).unwrap_err(),
        EncoderError::IdOutOfRange { id: 9, size: 4 }
    ));
}

#[test]
fn pooling_ignores_pad_position() {
    let model = tiny_model(8);
    let before = Batch {
        token_ids: vec![vec![5, PAD_ID, 6]],
        pad_mask: vec![vec![true, false, true]],
        labels: vec![0],
    };
    let after = Batch {
        token_ids: vec![vec![5, 6, PAD_ID]],
        pad_mask: vec![vec![true, true, false]],
        labels: vec![0],
    };
    let tape = Tape::new();
    let a = model.encode(&before, &tape).unwrap().pooled.data();
    let b = model.encode(&after, &tape).unwrap().pooled.data();
    assert_eq!(a, b);
}

#[test]
fn token_views_count_non_pad_tokens() {
    let model = tiny_model(8);
    let batch = Batch {
        token_ids: vec![vec![5, 6, 7, PAD_ID, PAD_ID], vec![1, 2, 5, 6, 7]],
        pad_mask: vec![
            vec![true, true, true, false, false],
            vec![true, true, true, true, true],
        ],
        labels: vec![1, 0],
    };
    let tape = Tape::new();
    let out = model.encode(&batch, &tape).unwrap();
    let (flat, labels) = token_views_for_dml(&out.token_embeddings, &batch.pad_mask, &batch.labels).unwrap();
    assert_eq!(flat.shape(), vec![8, 4]);
    assert_eq!(labels, vec![1, 1, 1, 0, 0, 0, 0, 0]);
}

#[test]
fn all_pad_row_contributes_no_tokens() {
    let model = tiny_model(8);
    let batch = Batch {
        token_ids: vec![vec![PAD_ID, PAD_ID], vec![5, 6]],
        pad_mask: vec![vec![false, false], vec![true, true]],
        labels: vec![0, 1],
    };
    let tape = Tape::new();
    let out = model.encode(&batch, &tape).unwrap();
    let (flat, labels) = token_views_for_dml(&out.token_embeddings, &batch.pad_mask, &batch.labels).unwrap();
    assert_eq!(flat.shape(), vec![2, 4]);
    assert_eq!(labels, vec![1, 1]);
    // The all-padding row pools to the zero vector rather than dividing by
    // zero.
    assert_eq!(out.pooled.data()[..4], vec![0.0; 4]);
}

#[test]
fn triple_entropy_gradient_wrt_embedding_table_matches_finite_differences() {
    // Two-sentence batch; perturb the whole embedding table.
    let vocab = vocab_for(&["good fine", "bad poor"]);
    let records = [
        Record { text: "good fine".into(), text2: None, label: 1 },
        Record { text: "bad poor".into(), text2: None, label: 0 },
    ];
    let refs: Vec<&Record> = records.iter().collect();
    let batch = Batch::from_records(&refs, &vocab);
    let mut model = tiny_model(vocab.len());
    let d = model.dim;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(91);
    let proxy_data = normal_draws(&mut rng, 2 * 2 * d, 0.5);

    let loss_for = |model: &EncoderModel| -> f64 {
        let tape = Tape::new();
        let out = model.encode(&batch, &tape).unwrap();
        let (flat, token_labels) =
            token_views_for_dml(&out.token_embeddings, &batch.pad_mask, &batch.labels).unwrap();
        let proxies = tape.tensor(&[2, 2, d], proxy_data.clone(), true);
        let st = SoftTripleParams::new(proxies, 0.2, 2.0, 0.1).unwrap();
        let params = TripleEntropyParams::new(0.5, st).unwrap();
        let targets = one_hot(&tape, &batch.labels, 2).unwrap();
        triple_entropy_loss(&out.probs, &targets, &flat, &token_labels, &params)
            .unwrap()
            .scalar_value()
            .unwrap()
    };

    // Analytic gradient of the table from one recorded pass.
    let tape = Tape::new();
    let out = model.encode(&batch, &tape).unwrap();
    let (flat, token_labels) =
        token_views_for_dml(&out.token_embeddings, &batch.pad_mask, &batch.labels).unwrap();
    let proxies = tape.tensor(&[2, 2, d], proxy_data.clone(), true);
    let st = SoftTripleParams::new(proxies, 0.2, 2.0, 0.1).unwrap();
    let params = TripleEntropyParams::new(0.5, st).unwrap();
    let targets = one_hot(&tape, &batch.labels, 2).unwrap();
    let loss = triple_entropy_loss(&out.probs, &targets, &flat, &token_labels, &params).unwrap();
    loss.backward().unwrap();
    let analytic = out.leaves.embedding.grad().unwrap();

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = model.embedding.data[i];
        model.embedding.data[i] = orig + h;
        let plus = loss_for(&model);
        model.embedding.data[i] = orig - h;
        let minus = loss_for(&model);
        model.embedding.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    assert!(max_rel < 1e-4, "max rel err {max_rel}");
}

#[test]
fn soft_triple_gradient_flows_through_token_views() {
    let model = tiny_model(8);
    let batch = Batch {
        token_ids: vec![vec![5, 6], vec![7, PAD_ID]],
        pad_mask: vec![vec![true, true], vec![true, false]],
        labels: vec![0, 1],
    };
    let tape = Tape::new();
    let out = model.encode(&batch, &tape).unwrap();
    let (flat, token_labels) =
        token_views_for_dml(&out.token_embeddings, &batch.pad_mask, &batch.labels).unwrap();
    let proxies = tape.tensor(&[2, 1, 4], vec![0.1; 8], true);
    let st = SoftTripleParams::new(proxies.clone(), 0.2, 2.0, 0.0).unwrap();
    let loss = soft_triple_loss(&flat, &token_labels, &st).unwrap();
    loss.backward().unwrap();
    assert!(out.leaves.embedding.grad().is_some());
    assert!(proxies.grad().is_some());
    // Padding token's embedding row received no gradient.
    let emb_grad = out.leaves.embedding.grad().unwrap();
    assert!(emb_grad[PAD_ID * 4..(PAD_ID + 1) * 4].iter().all(|&g| g == 0.0));
}

#[test]
fn checkpoint_round_trips() {
    let model = tiny_model(16);
    let extras = CheckpointExtras {
        class_names: vec!["neg".into(), "pos".into()],
        objective: "ce".into(),
        prototypes: None,
    };
    let f = tempfile::NamedTempFile::new().unwrap();
    save_checkpoint(&model, &extras, f.path()).unwrap();
    let (back, back_extras) = load_checkpoint(f.path()).unwrap();
    assert_eq!(back.dim, model.dim);
    assert_eq!(back.embedding.data, model.embedding.data);
    assert_eq!(back.head_b.data, model.head_b.data);
    assert_eq!(back_extras.class_names, extras.class_names);
    assert_eq!(back_extras.objective, "ce");

    // Version mismatches are rejected.
    let body = std::fs::read_to_string(f.path()).unwrap();
    let tampered = body.replacen("\"version\":1", "\"version\":9", 1);
    std::fs::write(f.path(), tampered).unwrap();
    assert!(matches!(
        load_checkpoint(f.path()).unwrap_err(),
        EncoderError::Version { found: 9, .. }
    ));
}
