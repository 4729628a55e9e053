//! Joint predict-and-explain training toolkit.
//!
//! A per-option classifier and a conditional text generator are trained
//! together under a weighted four-term objective (classification
//! cross-entropy, sequence likelihood, generator label cross-entropy and a
//! KL bridge between the two label distributions). The crate also ships the
//! dataset formats, beam-search decoding with a repetition penalty, and an
//! evaluation harness (accuracy, corpus BLEU and probe-based
//! simulatability).

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evalsuite;
pub mod netcore;
pub mod objective;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;

pub use corpus::{
    ClassifierInstance, ClassifierMode, GeneratorFormat, GeneratorInstance, McqaSample, NliLabel,
    NliSample, Sample, Supervision, Symbols, TaskKind,
};
pub use decoding::{DecodeConfig, Hypothesis};
pub use error::{Error, Result};
pub use evalsuite::EvalReport;
pub use netcore::{ModelBundle, ModelConfig};
pub use objective::{LossReport, LossWeights};
pub use tokenizer::Vocab;
pub use trainer::{TrainConfig, TrainState};

/// Version tag written into checkpoints and run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
