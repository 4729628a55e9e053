use jointex::corpus::{load_samples, write_jsonl, GeneratorFormat};
use jointex::decoding::explain;
use jointex::evalsuite::corpus_bleu;
use jointex::netcore::{load_checkpoint, BundleMeta};
use jointex::synthetic::CopyKeyConfig;
use jointex::trainer::{build_vocabs, fit, predict, FitOptions};
use jointex::{ClassifierMode, DecodeConfig, ModelBundle, ModelConfig, Sample, TaskKind, TrainConfig};
use proptest::prelude::*;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn bundle(train: &[Sample]) -> ModelBundle {
    let meta = BundleMeta {
        classifier_mode: ClassifierMode::QaEvidence,
        generator_format: GeneratorFormat::detect(train),
        max_seq_len: 32,
        ..BundleMeta::default()
    };
    let (cv, gv) = build_vocabs(train, &meta, 200).unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_size: 16,
        num_labels: 4,
        max_positions: 32,
        ..ModelConfig::default()
    };
    ModelBundle::new(cfg, meta, cv, gv, 11).unwrap()
}

#[test]
fn jsonl_train_checkpoint_predict_explain() {
    let dir = tempfile::tempdir().unwrap();
    let (train, dev) = CopyKeyConfig::default().splits(24, 8, 3).unwrap();
    write_jsonl(dir.path().join("train.jsonl"), &train).unwrap();
    write_jsonl(dir.path().join("dev.jsonl"), &dev).unwrap();
    let train = load_samples(dir.path().join("train.jsonl"), TaskKind::Mcqa).unwrap();
    let dev = load_samples(dir.path().join("dev.jsonl"), TaskKind::Mcqa).unwrap();
    assert_eq!((train.len(), dev.len()), (24, 8));

    let config = TrainConfig {
        epochs: 2,
        batch_size: 8,
        grad_accumulation_steps: 1,
        max_seq_len: 32,
        classifier_lr: 1e-3,
        ..TrainConfig::default()
    };
    let out_dir = dir.path().join("run");
    let outcome = fit(
        bundle(&train),
        &train,
        &dev,
        &config,
        &FitOptions {
            out_dir: Some(out_dir.clone()),
        },
    )
    .unwrap();
    assert_eq!(outcome.state.step, 6);

    let (restored, _) = load_checkpoint(out_dir.join("best")).unwrap();
    let preds = predict(&restored, &dev).unwrap();
    assert_eq!(preds, predict(&outcome.best, &dev).unwrap());
    let correct = preds.iter().zip(&dev).filter(|(p, s)| **p == s.label()).count();
    assert_eq!(correct as f64 / dev.len() as f64, outcome.state.best.accuracy);

    let decode = DecodeConfig {
        beams: 3,
        max_len: 6,
        num_return: 2,
        ..DecodeConfig::default()
    };
    for s in &dev {
        let hyps = explain(&restored, s, &decode).unwrap();
        assert_eq!(hyps.len(), 2);
        assert!(hyps[0].log_prob >= hyps[1].log_prob);
        assert!(hyps.iter().all(|h| h.text.split_whitespace().count() <= 6));
    }
}

#[test]
fn label_count_mismatch_is_rejected() {
    let (train, dev) = CopyKeyConfig {
        num_options: 3,
        ..CopyKeyConfig::default()
    }
    .splits(8, 4, 0)
    .unwrap();
    let train: Vec<Sample> = train.into_iter().map(Sample::Mcqa).collect();
    let dev: Vec<Sample> = dev.into_iter().map(Sample::Mcqa).collect();
    let Err(err) = fit(bundle(&train), &train, &dev, &TrainConfig::default(), &FitOptions::default()) else {
        panic!("a 4-label model accepted 3-option samples");
    };
    assert!(err.to_string().contains("3 labels"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bleu_bounds_and_identity(
        sents in prop::collection::vec(prop::collection::vec(0u8..6, 4..10), 1..6),
        other in prop::collection::vec(prop::collection::vec(0u8..6, 1..10), 1..6),
    ) {
        let text = |s: &Vec<u8>| s.iter().map(|t| format!("t{t}")).collect::<Vec<_>>().join(" ");
        let refs: Vec<Vec<String>> = sents.iter().map(|s| vec![text(s)]).collect();
        let same: Vec<String> = sents.iter().map(text).collect();
        prop_assert!((corpus_bleu(&same, &refs).unwrap() - 100.0).abs() < 1e-9);

        let cands: Vec<String> = sents.iter().enumerate().map(|(i, _)| text(&other[i % other.len()])).collect();
        let b = corpus_bleu(&cands, &refs).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
    }
}
