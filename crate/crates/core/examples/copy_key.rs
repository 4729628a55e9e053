//! Trains the joint model on the synthetic copy-key task and prints the dev
//! accuracy after every epoch.
//!
//! usage: copy_key [epochs] [seed] [lambda_ce lambda_mle lambda_ce_g lambda_dis] [decisive_fraction]

use std::time::Instant;

use jointex::corpus::{ClassifierMode, Sample};
use jointex::netcore::BundleMeta;
use jointex::synthetic::CopyKeyConfig;
use jointex::trainer::{build_vocabs, fit, FitOptions, MetricRecord, TrainConfig};
use jointex::{LossWeights, ModelBundle, ModelConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> jointex::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let num = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let epochs = num(0, 10.0) as usize;
    let seed = num(1, 0.0) as u64;
    let weights = LossWeights::new(num(2, 1.0), num(3, 1.0), num(4, 1.0), num(5, 1.0));
    let task = CopyKeyConfig {
        decisive_fraction: num(6, 1.0),
        ..CopyKeyConfig::default()
    };
    let n_train = num(9, 2000.0) as usize;
    let (train, dev) = task.splits(n_train, 200, seed)?;
    let train: Vec<Sample> = train.into_iter().map(Sample::Mcqa).collect();
    let dev: Vec<Sample> = dev.into_iter().map(Sample::Mcqa).collect();
    let meta = BundleMeta {
        classifier_mode: ClassifierMode::QaEvidence,
        max_seq_len: 64,
        ..BundleMeta::default()
    };
    let (cv, gv) = build_vocabs(&train, &meta, 1000)?;
    let model = ModelConfig {
        num_labels: 4,
        max_positions: 64,
        ..ModelConfig::default()
    };
    let bundle = ModelBundle::new(model, meta, cv, gv, seed)?;
    let config = TrainConfig {
        epochs,
        seed,
        weights,
        classifier_lr: num(7, 1e-3),
        generator_lr: num(8, 1e-3),
        batch_size: 16,
        grad_accumulation_steps: 1,
        max_seq_len: 64,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = fit(bundle, &train, &dev, &config, &FitOptions::default())?;
    for m in &out.state.metrics {
        if let MetricRecord::Dev { epoch, accuracy, .. } = m {
            println!("epoch {epoch}: dev accuracy {accuracy:.3}");
        }
    }
    println!("best {:.3} in {:.1}s", out.state.best.accuracy, start.elapsed().as_secs_f64());
    Ok(())
}
