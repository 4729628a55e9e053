//! Fixtures shared by the criterion benches.

use jointex::corpus::{ClassifierMode, Sample};
use jointex::netcore::BundleMeta;
use jointex::synthetic::CopyKeyConfig;
use jointex::trainer::{build_vocabs, encode_samples, EncodedSample};
use jointex::{ModelBundle, ModelConfig};

/// Copy-key samples plus a freshly initialized reference-size model.
pub fn copy_key_fixture(n: usize, seed: u64) -> (ModelBundle, Vec<EncodedSample>) {
    let samples: Vec<Sample> = CopyKeyConfig::default()
        .generate(n, seed, "bench")
        .expect("valid default config")
        .into_iter()
        .map(Sample::Mcqa)
        .collect();
    let meta = BundleMeta {
        classifier_mode: ClassifierMode::QaEvidence,
        max_seq_len: 64,
        ..BundleMeta::default()
    };
    let (cv, gv) = build_vocabs(&samples, &meta, 1000).expect("vocab");
    let config = ModelConfig {
        num_labels: 4,
        max_positions: 64,
        ..ModelConfig::default()
    };
    let bundle = ModelBundle::new(config, meta, cv, gv, seed).expect("bundle");
    let encoded = encode_samples(&bundle, &samples).expect("encode");
    (bundle, encoded)
}
