use super::*;
use crate::corpus::{McqaSample, NliLabel, NliSample};
use crate::netcore::load_checkpoint;
use crate::synthetic::CopyKeyConfig;
use crate::{ModelConfig, TaskKind};

fn mcqa(id: &str, k: usize, explanation: Option<&str>) -> Sample {
    Sample::Mcqa(McqaSample {
        id: id.into(),
        question: "where is it".into(),
        options: (0..k).map(|i| format!("o{i}")).collect(),
        answer_index: 1,
        evidence: None,
        question_context: None,
        explanation: explanation.map(str::to_string),
    })
}

fn synthetic(n: usize, seed: u64) -> Vec<Sample> {
    CopyKeyConfig::default()
        .generate(n, seed, "t")
        .unwrap()
        .into_iter()
        .map(Sample::Mcqa)
        .collect()
}

fn tiny_bundle(samples: &[Sample], seed: u64) -> ModelBundle {
    let meta = BundleMeta {
        classifier_mode: ClassifierMode::QaEvidence,
        generator_format: GeneratorFormat::detect(samples),
        max_seq_len: 48,
        ..BundleMeta::default()
    };
    let (cv, gv) = build_vocabs(samples, &meta, 500).unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_size: 16,
        num_labels: 4,
        max_positions: 48,
        ..ModelConfig::default()
    };
    ModelBundle::new(cfg, meta, cv, gv, seed).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        grad_accumulation_steps: 2,
        classifier_lr: 1e-3,
        max_seq_len: 48,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn batch_is_sample_major() {
    let samples = [mcqa("a", 5, Some("because")), mcqa("b", 5, None)];
    let b = make_batch(&samples, ClassifierMode::QaOnly, &Symbols::default(), GeneratorFormat::Mixed).unwrap();
    assert_eq!(b.classifier.len(), 10);
    assert_eq!(b.group_size, 5);
    assert_eq!(b.classifier[5].option_index, 0);
    assert_eq!(b.classifier[6].label, 1);
    assert_eq!(b.generator.len(), 2);
    assert!(b.generator[0].has_explanation && !b.generator[1].has_explanation);
}

#[test]
fn unexplained_target_is_the_answer() {
    let samples = [mcqa("a", 3, None)];
    let b = make_batch(&samples, ClassifierMode::QaOnly, &Symbols::default(), GeneratorFormat::Homogeneous).unwrap();
    assert_eq!(b.generator[0].target_text, "The answer is o1");
}

#[test]
fn nli_batch_has_one_instance_per_sample() {
    let samples: Vec<Sample> = NliLabel::ALL
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            Sample::Nli(NliSample {
                id: format!("n{i}"),
                premise: "a man sleeps".into(),
                hypothesis: "a person rests".into(),
                label,
                explanations: vec!["sleeping is resting".into()],
            })
        })
        .collect();
    let b = make_batch(&samples, ClassifierMode::QaOnly, &Symbols::default(), GeneratorFormat::Homogeneous).unwrap();
    assert_eq!(b.classifier.len(), 3);
    assert_eq!(b.group_size, 1);
    assert_eq!(b.labels, vec![0, 1, 2]);
    assert_eq!(b.classifier[2].label, 2);
}

#[test]
fn mixed_option_counts_are_rejected() {
    let samples = [mcqa("a", 5, None), mcqa("b", 3, None)];
    let err = make_batch(&samples, ClassifierMode::QaOnly, &Symbols::default(), GeneratorFormat::Homogeneous);
    assert!(matches!(err, Err(Error::Batch(_))));
}

#[test]
fn config_validation_lists_every_problem() {
    let cfg = TrainConfig {
        batch_size: 0,
        dropout: 1.5,
        weights: LossWeights { tau: 0.0, ..LossWeights::default() },
        ..TrainConfig::default()
    };
    assert_eq!(cfg.problems().len(), 3);
    assert_eq!(TrainConfig::default().total_steps(100), 10 * 2);
}

#[test]
fn selector_weights_leave_generator_out_of_the_classifier_trajectory() {
    let samples = synthetic(16, 1);
    let a = tiny_bundle(&samples, 7);
    // Same classifier, different generator: a larger one.
    let mut b = a.clone();
    let mut cfg_b = b.config.clone();
    cfg_b.d_model = 16;
    cfg_b.ffn_size = 32;
    b.generator = crate::netcore::Generator::new(&cfg_b, &mut crate::netcore::component_rng(99, Component::Generator));

    let config = TrainConfig {
        weights: LossWeights::classifier_only(),
        ..quick_config()
    };
    let run = |mut bundle: ModelBundle| {
        let data = encode_samples(&bundle, &samples).unwrap();
        let mut t = Trainer::new(&bundle, config.clone(), 4).unwrap();
        for chunk in data.chunks(4) {
            let r = t.train_step(&mut bundle, &[chunk]).unwrap();
            assert_eq!((r.mle, r.ce_g, r.dis), (0.0, 0.0, 0.0));
            assert_eq!(r.total, r.ce);
        }
        bundle
    };
    let gen_before = b.generator.params.clone();
    let (ra, rb) = (run(a), run(b));
    assert_eq!(ra.classifier.params, rb.classifier.params);
    assert_eq!(rb.generator.params, gen_before);
}

#[test]
fn accumulation_matches_one_combined_batch() {
    let samples = synthetic(8, 2);
    let bundle = tiny_bundle(&samples, 4);
    let data = encode_samples(&bundle, &samples).unwrap();
    let config = TrainConfig {
        reduction: Reduction::Sum,
        grad_accumulation_steps: 4,
        ..quick_config()
    };
    let mut split = bundle.clone();
    let mut t1 = Trainer::new(&split, config.clone(), 1).unwrap();
    let micro: Vec<&[EncodedSample]> = data.chunks(2).collect();
    t1.train_step(&mut split, &micro).unwrap();

    let mut whole = bundle.clone();
    let mut t2 = Trainer::new(&whole, TrainConfig { grad_accumulation_steps: 1, ..config }, 1).unwrap();
    t2.train_step(&mut whole, &[&data]).unwrap();

    for (comp_a, comp_b) in [
        (&split.classifier.params, &whole.classifier.params),
        (&split.generator.params, &whole.generator.params),
    ] {
        for ((name, x), (_, y)) in comp_a.iter().zip(comp_b.iter()) {
            let diff = (x - y).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-6, "{name}: {diff}");
        }
    }
}

#[test]
fn shuffling_a_batch_keeps_the_loss() {
    let samples = synthetic(6, 3);
    let bundle = tiny_bundle(&samples, 5);
    let data = encode_samples(&bundle, &samples).unwrap();
    let config = quick_config();
    let a = batch_losses(&bundle, &data, &config).unwrap();
    let mut rev = data.clone();
    rev.reverse();
    rev.swap(0, 2);
    let b = batch_losses(&bundle, &rev, &config).unwrap();
    assert!((a.total - b.total).abs() < 1e-12);
    let sum = a.ce + a.mle + a.ce_g + a.dis;
    assert!((a.total - sum).abs() < 1e-9);
}

#[test]
fn unexplained_samples_carry_no_explanation_tokens() {
    // "zebra" only occurs in an explanation body; an unexplained copy of
    // the sample must leave its embedding row untouched.
    let explained = mcqa("a", 3, Some("zebra stripes"));
    let mut bare = explained.clone();
    if let Sample::Mcqa(s) = &mut bare {
        s.explanation = None;
    }
    let meta = BundleMeta {
        generator_format: GeneratorFormat::Mixed,
        max_seq_len: 48,
        ..BundleMeta::default()
    };
    let (cv, gv) = build_vocabs(&[explained.clone(), bare.clone()], &meta, 500).unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_size: 16,
        num_labels: 3,
        max_positions: 48,
        ..ModelConfig::default()
    };
    let bundle = ModelBundle::new(cfg, meta, cv, gv.clone(), 0).unwrap();
    let data = encode_samples(&bundle, &[bare]).unwrap();
    let zebra = gv.id("zebra").unwrap();
    assert!(!data[0].target.contains(&zebra));

    let config = TrainConfig {
        weights: LossWeights::new(0.0, 1.0, 0.0, 0.0),
        dropout: 0.0,
        ..quick_config()
    };
    let mut t = Trainer::new(&bundle, config, 1).unwrap();
    t.accumulate(&bundle, &data, 1).unwrap();
    let embed = bundle.generator.params.index_of("gen.embed").unwrap();
    let row = t.gen_grads.grads[embed].row(zebra).to_owned();
    assert!(row.iter().all(|&x| x == 0.0));
    assert!(t.gen_grads.global_norm() > 0.0);
}

#[test]
fn non_finite_loss_aborts_with_report() {
    let samples = synthetic(4, 4);
    let mut bundle = tiny_bundle(&samples, 6);
    let w1 = bundle.classifier.params.index_of("cls.head.w1").unwrap();
    bundle.classifier.params.value_mut(w1).fill(f64::NAN);
    let data = encode_samples(&bundle, &samples).unwrap();
    let mut t = Trainer::new(&bundle, quick_config(), 1).unwrap();
    match t.train_step(&mut bundle, &[&data]) {
        Err(Error::Training { step, report }) => {
            assert_eq!(step, 0);
            assert!(report.contains("non-finite"));
        }
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn clipping_bounds_the_update_norm() {
    let samples = synthetic(4, 5);
    let bundle = tiny_bundle(&samples, 8);
    let data = encode_samples(&bundle, &samples).unwrap();
    let mut t = Trainer::new(&bundle, quick_config(), 1).unwrap();
    t.accumulate(&bundle, &data, 1).unwrap();
    let norm = t.cls_grads.global_norm();
    t.cls_grads.scale(10.0 / norm);
    let before = t.cls_grads.clip_global_norm(1.0);
    assert!((before - 10.0).abs() < 1e-9);
    assert!((t.cls_grads.global_norm() - 1.0).abs() < 1e-6);
}

#[test]
fn best_tracker_keeps_the_first_maximum() {
    let mut b = BestTracker::default();
    for (epoch, acc) in [(1, 0.3), (2, 0.5), (3, 0.4), (4, 0.5)] {
        b.observe(epoch, acc);
    }
    assert_eq!(b.epoch, 2);
    assert_eq!(b.accuracy, 0.5);
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let samples = synthetic(8, 6);
    let bundle = tiny_bundle(&samples, 9);
    let config = TrainConfig {
        epochs: 0,
        ..quick_config()
    };
    let out = fit(bundle.clone(), &samples[..6], &samples[6..], &config, &FitOptions::default()).unwrap();
    assert_eq!(out.best.classifier.params, bundle.classifier.params);
    assert_eq!(out.state.best.epoch, 0);
    assert_eq!(out.state.metrics.len(), 1);
    assert!(out.state.best_dev_accuracy() >= 0.0);
}

#[test]
fn fit_is_reproducible_and_checkpoints_the_best_epoch() {
    let samples = synthetic(24, 7);
    let (train, dev) = samples.split_at(16);
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config();
    let opts = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
    };
    let a = fit(tiny_bundle(&samples, 1), train, dev, &config, &opts).unwrap();
    let b = fit(tiny_bundle(&samples, 1), train, dev, &config, &FitOptions::default()).unwrap();
    assert_eq!(a.state.metrics, b.state.metrics);
    assert_eq!(a.best.classifier.params, b.best.classifier.params);

    let steps = a.state.metrics.iter().filter(|m| matches!(m, MetricRecord::Step { .. })).count();
    assert_eq!(steps, config.total_steps(train.len()));
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), a.state.metrics.len());

    let (loaded, extra) = load_checkpoint(dir.path().join("best")).unwrap();
    assert_eq!(extra["dev_accuracy"].as_f64().unwrap(), a.state.best_dev_accuracy());
    let again = accuracy(&predict(&loaded, dev).unwrap(), &dev.iter().map(Sample::label).collect::<Vec<_>>()).unwrap();
    assert_eq!(again, a.state.best_dev_accuracy());
    assert_eq!(loaded.classifier.params, a.best.classifier.params);
    assert_eq!(a.best.config.task, TaskKind::Mcqa);
}

#[test]
fn loss_weights_scale_the_total() {
    let samples = synthetic(4, 8);
    let bundle = tiny_bundle(&samples, 2);
    let data = encode_samples(&bundle, &samples).unwrap();
    let half = TrainConfig {
        weights: LossWeights::new(0.5, 2.0, 0.0, 3.0),
        ..quick_config()
    };
    let r = batch_losses(&bundle, &data, &half).unwrap();
    assert!((r.total - (0.5 * r.ce + 2.0 * r.mle + 3.0 * r.dis)).abs() < 1e-9);
    assert!(r.mle > 0.0 && r.dis >= 0.0 && r.ce_g > 0.0);
    assert_eq!(r.sample_count, 4);
    assert_eq!(r.token_count, data.iter().map(|d| d.target.len()).sum::<usize>());
}
