use criterion::{criterion_group, criterion_main, Criterion};
use jointex::decoding::{beam_search, DecodeConfig};
use jointex::evalsuite::corpus_bleu;
use jointex::trainer::{TrainConfig, Trainer};
use jointex_bench::copy_key_fixture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn classifier_forward(c: &mut Criterion) {
    let (bundle, data) = copy_key_fixture(8, 1);
    let seqs: Vec<&[usize]> = data[0].inputs.iter().map(Vec::as_slice).collect();
    c.bench_function("classifier_logits_k4", |b| {
        b.iter(|| bundle.classifier.predict_logits(&seqs).unwrap())
    });
}

fn joint_step(c: &mut Criterion) {
    let (mut bundle, data) = copy_key_fixture(16, 2);
    let config = TrainConfig {
        grad_accumulation_steps: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&bundle, config, 1_000_000).unwrap();
    c.bench_function("joint_train_step_16", |b| {
        b.iter(|| trainer.train_step(&mut bundle, &[&data]).unwrap())
    });
}

fn beam(c: &mut Criterion) {
    let (bundle, data) = copy_key_fixture(1, 3);
    let config = DecodeConfig {
        beams: 4,
        max_len: 12,
        ..DecodeConfig::default()
    };
    c.bench_function("beam_search_b4_len12", |b| {
        b.iter(|| beam_search(&bundle.generator, &data[0].source, &config).unwrap())
    });
}

fn bleu(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sentence = |n: usize| -> String {
        (0..n).map(|_| format!("w{}", rng.gen_range(0..50))).collect::<Vec<_>>().join(" ")
    };
    let cands: Vec<String> = (0..500).map(|_| sentence(15)).collect();
    let refs: Vec<Vec<String>> = (0..500).map(|_| vec![sentence(15), sentence(12)]).collect();
    c.bench_function("corpus_bleu_500", |b| b.iter(|| corpus_bleu(&cands, &refs).unwrap()));
}

criterion_group!(benches, classifier_forward, joint_step, beam, bleu);
criterion_main!(benches);
