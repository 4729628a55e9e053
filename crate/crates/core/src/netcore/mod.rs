//! Reference classifier encoder and generator encoder–decoder.
//!
//! Both are small pre-norm transformers with sinusoidal positions. They share
//! no parameters. The classifier scores each option from the first-token
//! state; the generator produces token logits plus a K-way label distribution
//! pooled over its decoder states.

pub mod checkpoint;
pub mod graph;
pub mod heads;
pub mod layers;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassifierMode, GeneratorFormat, Symbols, TaskKind};
use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, PAD};
use graph::{Graph, Mat, Var};
use heads::{GeneratorLabelHead, PredictionHead, TokenProjection};
use layers::{block_mask, causal_mask, sinusoidal_table, DecoderLayer, EncoderLayer, LayerNorm, Linear, Mode};
use params::{random_normal, Component, ParamStore};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};

/// Decoder start symbol (PAD, as in T5).
pub const DECODER_START: usize = PAD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::num_layers")]
    pub num_layers: usize,
    #[serde(default = "defaults::num_heads")]
    pub num_heads: usize,
    #[serde(default = "defaults::ffn_size")]
    pub ffn_size: usize,
    #[serde(default)]
    pub classifier_vocab_size: usize,
    #[serde(default)]
    pub generator_vocab_size: usize,
    /// K: options (MCQA) or classes (NLI).
    #[serde(default = "defaults::num_labels")]
    pub num_labels: usize,
    #[serde(default = "defaults::task")]
    pub task: TaskKind,
    #[serde(default = "defaults::max_positions")]
    pub max_positions: usize,
}

mod defaults {
    use crate::corpus::TaskKind;

    pub fn d_model() -> usize {
        64
    }
    pub fn num_layers() -> usize {
        2
    }
    pub fn num_heads() -> usize {
        2
    }
    pub fn ffn_size() -> usize {
        128
    }
    pub fn num_labels() -> usize {
        5
    }
    pub fn task() -> TaskKind {
        TaskKind::Mcqa
    }
    pub fn max_positions() -> usize {
        256
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: defaults::d_model(),
            num_layers: defaults::num_layers(),
            num_heads: defaults::num_heads(),
            ffn_size: defaults::ffn_size(),
            classifier_vocab_size: 0,
            generator_vocab_size: 0,
            num_labels: defaults::num_labels(),
            task: defaults::task(),
            max_positions: defaults::max_positions(),
        }
    }
}

impl ModelConfig {
    /// Returns every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            out.push(format!(
                "d_model ({}) must be a positive multiple of num_heads ({})",
                self.d_model, self.num_heads
            ));
        }
        if self.num_labels < 2 {
            out.push(format!("num_labels must be at least 2, got {}", self.num_labels));
        }
        if self.ffn_size == 0 {
            out.push("ffn_size must be positive".into());
        }
        if self.max_positions == 0 {
            out.push("max_positions must be positive".into());
        }
        if self.task == TaskKind::Nli && self.num_labels != 3 {
            out.push(format!("NLI needs num_labels = 3, got {}", self.num_labels));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Param(problems.join("; ")))
        }
    }

    /// Output rows of the prediction head: one score per option for MCQA,
    /// one logit per class for NLI.
    pub fn head_outputs(&self) -> usize {
        match self.task {
            TaskKind::Mcqa => 1,
            TaskKind::Nli => self.num_labels,
        }
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    embed: usize,
    layers: Vec<EncoderLayer>,
    ln_final: LayerNorm,
}

impl Encoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, embed: usize, cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.num_layers)
            .map(|l| {
                EncoderLayer::new(store, rng, &format!("{prefix}.{l}"), cfg.d_model, cfg.num_heads, cfg.ffn_size)
            })
            .collect();
        Self {
            embed,
            layers,
            ln_final: LayerNorm::new(store, &format!("{prefix}.ln_final"), cfg.d_model),
        }
    }

    /// Encodes sequences packed back to back; rows of the result follow the
    /// concatenated input.
    fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        positions: &Mat,
        seqs: &[&[usize]],
        mode: &mut Mode,
    ) -> Var {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let pe = packed_positions(positions, &lengths);
        let table = g.param(store, self.embed);
        let x = g.embed(table, &ids);
        let x = g.add_const(x, &pe);
        let mut x = mode.dropout(g, x);
        let mask = block_mask(&lengths);
        for layer in &self.layers {
            x = layer.forward(g, store, x, &mask, mode);
        }
        self.ln_final.forward(g, store, x)
    }
}

fn packed_positions(table: &Mat, lengths: &[usize]) -> Mat {
    let n: usize = lengths.iter().sum();
    let mut out = Mat::zeros((n, table.ncols()));
    let mut row = 0;
    for &len in lengths {
        for p in 0..len {
            out.row_mut(row).assign(&table.row(p));
            row += 1;
        }
    }
    out
}

fn check_lengths(seqs: &[&[usize]], max: usize, vocab: usize) -> Result<()> {
    for s in seqs {
        if s.is_empty() {
            return Err(Error::Shape("empty input sequence".into()));
        }
        if s.len() > max {
            return Err(Error::Shape(format!(
                "sequence of length {} exceeds max_positions {max}",
                s.len()
            )));
        }
        if let Some(&bad) = s.iter().find(|&&id| id >= vocab) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {vocab}")));
        }
    }
    Ok(())
}

/// Encoder plus option-scoring head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub params: ParamStore,
    encoder: Encoder,
    w1: usize,
    b1: usize,
    w2: usize,
    positions: Mat,
    max_positions: usize,
    vocab_size: usize,
    task: TaskKind,
}

impl Classifier {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new(Component::Classifier);
        let d = cfg.d_model;
        let embed = store.add("cls.embed", random_normal(rng, cfg.classifier_vocab_size, d, 1.0));
        let encoder = Encoder::new(&mut store, rng, "cls.enc", embed, cfg);
        let w1 = store.add("cls.head.w1", random_normal(rng, d, d, 1.0 / (d as f64).sqrt()));
        let b1 = store.add("cls.head.b1", Mat::zeros((1, d)));
        let w2 = store.add(
            "cls.head.w2",
            random_normal(rng, cfg.head_outputs(), d, 1.0 / (d as f64).sqrt()),
        );
        Self {
            params: store,
            encoder,
            w1,
            b1,
            w2,
            positions: sinusoidal_table(cfg.max_positions, d),
            max_positions: cfg.max_positions,
            vocab_size: cfg.classifier_vocab_size,
            task: cfg.task,
        }
    }

    /// First-token hidden state of every input (n × d).
    pub fn first_token_states<'a>(
        &'a self,
        g: &mut Graph<'a>,
        seqs: &[&[usize]],
        mode: &mut Mode,
    ) -> Result<Var> {
        check_lengths(seqs, self.max_positions, self.vocab_size)?;
        let states = self.encoder.forward(g, &self.params, &self.positions, seqs, mode);
        let mut firsts = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for s in seqs {
            firsts.push(start);
            start += s.len();
        }
        Ok(g.select_rows(states, &firsts))
    }

    /// Label logits `p` (1 × K) for one sample: the K option inputs of an
    /// MCQA question, or the single NLI input.
    pub fn logits<'a>(&'a self, g: &mut Graph<'a>, seqs: &[&[usize]], mode: &mut Mode) -> Result<Var> {
        let expected = match self.task {
            TaskKind::Mcqa => seqs.len(),
            TaskKind::Nli => 1,
        };
        if seqs.len() != expected || seqs.is_empty() {
            return Err(Error::Shape(format!("{} classifier inputs for one sample", seqs.len())));
        }
        let h = self.first_token_states(g, seqs, mode)?;
        let w1 = g.param(&self.params, self.w1);
        let b1 = g.param(&self.params, self.b1);
        let w2 = g.param(&self.params, self.w2);
        let scores = heads::prediction_head(g, h, w1, b1, w2);
        Ok(match self.task {
            TaskKind::Mcqa => g.transpose(scores),
            TaskKind::Nli => scores,
        })
    }

    /// Eval-mode first-token vector of a single input.
    pub fn encode(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let h = self.first_token_states(&mut g, &[ids], &mut Mode::Eval)?;
        Ok(g.value(h).row(0).to_vec())
    }

    /// Eval-mode label logits.
    pub fn predict_logits(&self, seqs: &[&[usize]]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.logits(&mut g, seqs, &mut Mode::Eval)?;
        Ok(g.value(p).row(0).to_vec())
    }

    pub fn head(&self) -> PredictionHead {
        PredictionHead {
            w1: self.params.value(self.w1).clone(),
            b1: self.params.value(self.b1).clone(),
            w2: self.params.value(self.w2).clone(),
        }
    }
}

/// Encoder–decoder with token projection and label head.
#[derive(Debug, Clone)]
pub struct Generator {
    pub params: ParamStore,
    encoder: Encoder,
    decoder: Vec<DecoderLayer>,
    dec_ln_final: LayerNorm,
    projection: Linear,
    label_head: Linear,
    positions: Mat,
    max_positions: usize,
    vocab_size: usize,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new(Component::Generator);
        let d = cfg.d_model;
        let v = cfg.generator_vocab_size;
        let embed = store.add("gen.embed", random_normal(rng, v, d, 1.0));
        let encoder = Encoder::new(&mut store, rng, "gen.enc", embed, cfg);
        let decoder = (0..cfg.num_layers)
            .map(|l| DecoderLayer::new(&mut store, rng, &format!("gen.dec.{l}"), d, cfg.num_heads, cfg.ffn_size))
            .collect();
        let dec_ln_final = LayerNorm::new(&mut store, "gen.dec.ln_final", d);
        let projection = Linear::new(&mut store, rng, "gen.proj", v, d);
        let label_head = Linear::new(&mut store, rng, "gen.label", cfg.num_labels, d);
        Self {
            params: store,
            encoder,
            decoder,
            dec_ln_final,
            projection,
            label_head,
            positions: sinusoidal_table(cfg.max_positions, d),
            max_positions: cfg.max_positions,
            vocab_size: v,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Encoder states `C` (M × d).
    pub fn encode<'a>(&'a self, g: &mut Graph<'a>, src: &[usize], mode: &mut Mode) -> Result<Var> {
        check_lengths(&[src], self.max_positions, self.vocab_size)?;
        Ok(self.encoder.forward(g, &self.params, &self.positions, &[src], mode))
    }

    /// Decoder states `H` (T × d) for teacher-forced inputs.
    pub fn decode<'a>(
        &'a self,
        g: &mut Graph<'a>,
        memory: Var,
        tgt_in: &[usize],
        mode: &mut Mode,
    ) -> Result<Var> {
        check_lengths(&[tgt_in], self.max_positions, self.vocab_size)?;
        let store = &self.params;
        let table = g.param(store, self.encoder.embed);
        let x = g.embed(table, tgt_in);
        let pe = packed_positions(&self.positions, &[tgt_in.len()]);
        let x = g.add_const(x, &pe);
        let mut x = mode.dropout(g, x);
        let causal = causal_mask(tgt_in.len());
        let cross = Mat::zeros((tgt_in.len(), g.value(memory).nrows()));
        for layer in &self.decoder {
            x = layer.forward(g, store, x, memory, &causal, &cross, mode);
        }
        Ok(self.dec_ln_final.forward(g, store, x))
    }

    /// Token logits (T × V) and decoder states H (T × d).
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        src: &[usize],
        tgt_in: &[usize],
        mode: &mut Mode,
    ) -> Result<(Var, Var)> {
        let memory = self.encode(g, src, mode)?;
        let states = self.decode(g, memory, tgt_in, mode)?;
        let logits = self.projection.forward(g, &self.params, states);
        Ok((logits, states))
    }

    /// Label logits `g` (1 × K) pooled over the listed decoder rows.
    pub fn label_logits<'a>(&'a self, g: &mut Graph<'a>, states: Var, rows: &[usize]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Pooling("every decoder position is masked".into()));
        }
        let w3 = g.param(&self.params, self.label_head.w);
        let b3 = g.param(&self.params, self.label_head.b);
        Ok(heads::label_head(g, states, w3, b3, rows))
    }

    /// Eval-mode forward returning plain matrices.
    pub fn forward(&self, src: &[usize], tgt_in: &[usize]) -> Result<(Mat, Mat)> {
        let mut g = Graph::new();
        let (logits, states) = self.forward_graph(&mut g, src, tgt_in, &mut Mode::Eval)?;
        Ok((g.value(logits).clone(), g.value(states).clone()))
    }

    /// Eval-mode encoder states, reused across decoding steps.
    pub fn encode_source(&self, src: &[usize]) -> Result<Mat> {
        let mut g = Graph::new();
        let m = self.encode(&mut g, src, &mut Mode::Eval)?;
        Ok(g.value(m).clone())
    }

    /// Logits for the token following `prefix` (which starts with the
    /// decoder start symbol).
    pub fn next_token_logits(&self, memory: &Mat, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mem = g.input(memory.clone());
        let states = self.decode(&mut g, mem, prefix, &mut Mode::Eval)?;
        let last = g.select_rows(states, &[prefix.len() - 1]);
        let logits = self.projection.forward(&mut g, &self.params, last);
        Ok(g.value(logits).row(0).to_vec())
    }

    pub fn token_projection(&self) -> TokenProjection {
        TokenProjection {
            w: self.params.value(self.projection.w).clone(),
            b2: self.params.value(self.projection.b).clone(),
        }
    }

    pub fn label_head(&self) -> GeneratorLabelHead {
        GeneratorLabelHead {
            w3: self.params.value(self.label_head.w).clone(),
            b3: self.params.value(self.label_head.b).clone(),
        }
    }
}

/// Shifts a target right behind the decoder start symbol.
pub fn teacher_forcing_inputs(target: &[usize]) -> Vec<usize> {
    std::iter::once(DECODER_START)
        .chain(target.iter().take(target.len().saturating_sub(1)).copied())
        .collect()
}

/// Inference settings stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub symbols: Symbols,
    pub classifier_mode: ClassifierMode,
    pub generator_format: GeneratorFormat,
    pub max_seq_len: usize,
}

impl Default for BundleMeta {
    fn default() -> Self {
        Self {
            symbols: Symbols::default(),
            classifier_mode: ClassifierMode::QaOnly,
            generator_format: GeneratorFormat::Homogeneous,
            max_seq_len: 256,
        }
    }
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub meta: BundleMeta,
    pub classifier_vocab: Vocab,
    pub generator_vocab: Vocab,
    pub classifier: Classifier,
    pub generator: Generator,
}

/// Independent RNG stream per component, derived from one seed.
pub fn component_rng(seed: u64, component: Component) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match component {
        Component::Classifier => 1,
        Component::Generator => 2,
    });
    rng
}

impl ModelBundle {
    pub fn new(
        mut config: ModelConfig,
        meta: BundleMeta,
        classifier_vocab: Vocab,
        generator_vocab: Vocab,
        seed: u64,
    ) -> Result<Self> {
        config.classifier_vocab_size = classifier_vocab.len();
        config.generator_vocab_size = generator_vocab.len();
        config.validate()?;
        let classifier = Classifier::new(&config, &mut component_rng(seed, Component::Classifier));
        let generator = Generator::new(&config, &mut component_rng(seed, Component::Generator));
        Ok(Self {
            config,
            meta,
            classifier_vocab,
            generator_vocab,
            classifier,
            generator,
        })
    }
}

#[cfg(test)]
mod tests;
