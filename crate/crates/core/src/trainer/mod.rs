//! Joint training of classifier and generator.
//!
//! Every sample gets its own graph holding the classifier logits `p`, the
//! generator token logits and the pooled generator label logits `g`, so the
//! distillation term always pairs a sample with itself. Gradients are summed
//! into per-component buffers and applied once per optimizer step.

pub mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_classifier_inputs, build_generator_instance, supervision_of, ClassifierInstance, ClassifierMode,
    GeneratorFormat, GeneratorInstance, Sample, Symbols,
};
use crate::error::{Error, Result};
use crate::evalsuite::accuracy;
use crate::netcore::graph::{Graph, Var};
use crate::netcore::layers::Mode;
use crate::netcore::params::{Component, GradBuffer};
use crate::netcore::{save_checkpoint, teacher_forcing_inputs, BundleMeta, ModelBundle};
use crate::objective::{DistillOptions, LossParts, LossReport, LossWeights, Reduction};
use crate::tokenizer::{build_vocab, Tokenizer, Vocab, EOS};
use optim::{linear_schedule, Adafactor, AdamW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "defaults::warmup_proportion")]
    pub warmup_proportion: f64,
    #[serde(default = "defaults::grad_clip_norm")]
    pub grad_clip_norm: f64,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default = "defaults::classifier_lr")]
    pub classifier_lr: f64,
    #[serde(default = "defaults::generator_lr")]
    pub generator_lr: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::grad_accumulation_steps")]
    pub grad_accumulation_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub distill: DistillOptions,
    #[serde(default)]
    pub reduction: Reduction,
}

mod defaults {
    pub fn epochs() -> usize {
        10
    }
    pub fn max_seq_len() -> usize {
        256
    }
    pub fn warmup_proportion() -> f64 {
        0.1
    }
    pub fn grad_clip_norm() -> f64 {
        1.0
    }
    pub fn dropout() -> f64 {
        0.1
    }
    pub fn classifier_lr() -> f64 {
        2e-5
    }
    pub fn generator_lr() -> f64 {
        1e-3
    }
    pub fn weight_decay() -> f64 {
        0.01
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn grad_accumulation_steps() -> usize {
        4
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            max_seq_len: defaults::max_seq_len(),
            warmup_proportion: defaults::warmup_proportion(),
            grad_clip_norm: defaults::grad_clip_norm(),
            dropout: defaults::dropout(),
            classifier_lr: defaults::classifier_lr(),
            generator_lr: defaults::generator_lr(),
            weight_decay: defaults::weight_decay(),
            batch_size: defaults::batch_size(),
            grad_accumulation_steps: defaults::grad_accumulation_steps(),
            seed: 0,
            weights: LossWeights::default(),
            distill: DistillOptions::default(),
            reduction: Reduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.weights.problems();
        if self.max_seq_len < 2 {
            out.push(format!("max_seq_len must be at least 2, got {}", self.max_seq_len));
        }
        if !(0.0..=1.0).contains(&self.warmup_proportion) {
            out.push(format!("warmup_proportion must be in [0, 1], got {}", self.warmup_proportion));
        }
        if !(self.grad_clip_norm > 0.0) {
            out.push(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        for (name, lr) in [("classifier_lr", self.classifier_lr), ("generator_lr", self.generator_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                out.push(format!("{name} must be a non-negative number, got {lr}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if self.grad_accumulation_steps == 0 {
            out.push("grad_accumulation_steps must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Param(p.join("; ")))
        }
    }

    /// Optimizer steps for `n` training samples.
    pub fn total_steps(&self, n: usize) -> usize {
        let micro = n.div_ceil(self.batch_size);
        self.epochs * micro.div_ceil(self.grad_accumulation_steps)
    }
}

/// Text side of a batch: classifier instances in sample-major order and one
/// generator pair per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBatch {
    pub classifier: Vec<ClassifierInstance>,
    /// Instances per sample (K for MCQA, 1 for NLI).
    pub group_size: usize,
    pub labels: Vec<usize>,
    pub generator: Vec<GeneratorInstance>,
}

pub fn make_batch(
    samples: &[Sample],
    mode: ClassifierMode,
    symbols: &Symbols,
    format: GeneratorFormat,
) -> Result<TextBatch> {
    let Some(first) = samples.first() else {
        return Err(Error::Batch("empty batch".into()));
    };
    let (task, k) = (first.task(), first.num_labels());
    let mut batch = TextBatch {
        classifier: Vec::new(),
        group_size: 0,
        labels: Vec::with_capacity(samples.len()),
        generator: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        if s.task() != task || s.num_labels() != k {
            return Err(Error::Batch(format!(
                "{}: {} labels in a batch of {k}-label samples",
                s.id(),
                s.num_labels()
            )));
        }
        let inputs = build_classifier_inputs(s, mode, symbols)?;
        batch.group_size = inputs.len();
        batch.classifier.extend(inputs);
        batch.labels.push(s.label());
        batch.generator.push(build_generator_instance(s, supervision_of(s), format)?);
    }
    Ok(batch)
}

/// Token ids of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub inputs: Vec<Vec<usize>>,
    pub label: usize,
    pub source: Vec<usize>,
    /// Ends with EOS.
    pub target: Vec<usize>,
    pub has_explanation: bool,
}

fn with_eos(vocab: &Vocab, text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = vocab.encode(text, max_len - 1);
    ids.push(EOS);
    ids
}

pub fn encode_batch(batch: &TextBatch, cls_vocab: &Vocab, gen_vocab: &Vocab, max_len: usize) -> Vec<EncodedSample> {
    batch
        .classifier
        .chunks(batch.group_size.max(1))
        .zip(&batch.labels)
        .zip(&batch.generator)
        .map(|((group, &label), gen)| EncodedSample {
            inputs: group.iter().map(|c| cls_vocab.encode(&c.input_text, max_len)).collect(),
            label,
            source: with_eos(gen_vocab, &gen.source_text, max_len),
            target: with_eos(gen_vocab, &gen.target_text, max_len),
            has_explanation: gen.has_explanation,
        })
        .collect()
}

/// Encodes samples with a bundle's vocabularies and rendering settings.
pub fn encode_samples(bundle: &ModelBundle, samples: &[Sample]) -> Result<Vec<EncodedSample>> {
    let m = &bundle.meta;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let batch = make_batch(chunk, m.classifier_mode, &m.symbols, m.generator_format)?;
        out.extend(encode_batch(&batch, &bundle.classifier_vocab, &bundle.generator_vocab, m.max_seq_len));
    }
    Ok(out)
}

/// Classifier-side ids only; works for samples that cannot form a generator
/// target.
pub fn encode_classifier_inputs(bundle: &ModelBundle, sample: &Sample) -> Result<Vec<Vec<usize>>> {
    let m = &bundle.meta;
    Ok(build_classifier_inputs(sample, m.classifier_mode, &m.symbols)?
        .iter()
        .map(|c| bundle.classifier_vocab.encode(&c.input_text, m.max_seq_len))
        .collect())
}

/// Vocabularies covering the classifier inputs and generator pairs of
/// `samples`.
pub fn build_vocabs(samples: &[Sample], meta: &BundleMeta, max_size: usize) -> Result<(Vocab, Vocab)> {
    let batch = make_batch(samples, meta.classifier_mode, &meta.symbols, meta.generator_format)?;
    let cls: Vec<&str> = batch.classifier.iter().map(|c| c.input_text.as_str()).collect();
    let gen: Vec<&str> = batch
        .generator
        .iter()
        .flat_map(|g| [g.source_text.as_str(), g.target_text.as_str()])
        .collect();
    Ok((build_vocab(&cls, max_size)?, build_vocab(&gen, max_size)?))
}

/// Argmax classifier label (lowest index on ties) per sample.
pub fn predict(bundle: &ModelBundle, samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            let inputs = encode_classifier_inputs(bundle, s)?;
            predict_encoded(bundle, &inputs)
        })
        .collect()
}

fn predict_encoded(bundle: &ModelBundle, inputs: &[Vec<usize>]) -> Result<usize> {
    let seqs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
    let logits = bundle.classifier.predict_logits(&seqs)?;
    Ok(argmax(&logits))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Step {
        step: usize,
        epoch: usize,
        #[serde(flatten)]
        loss: LossReport,
        classifier_lr: f64,
        generator_lr: f64,
        classifier_grad_norm: f64,
        generator_grad_norm: f64,
    },
    Dev {
        step: usize,
        epoch: usize,
        accuracy: f64,
        best_accuracy: f64,
        improved: bool,
    },
}

/// Tracks the best dev accuracy; only strict improvements replace it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestTracker {
    pub accuracy: f64,
    pub epoch: usize,
}

impl Default for BestTracker {
    fn default() -> Self {
        Self {
            accuracy: f64::NEG_INFINITY,
            epoch: 0,
        }
    }
}

impl BestTracker {
    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> bool {
        if accuracy > self.accuracy {
            self.accuracy = accuracy;
            self.epoch = epoch;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub best: BestTracker,
    pub best_checkpoint: Option<PathBuf>,
    pub metrics: Vec<MetricRecord>,
    pub checkpoint_errors: Vec<String>,
}

impl TrainState {
    pub fn best_dev_accuracy(&self) -> f64 {
        self.best.accuracy
    }
}

/// Optimizer state plus gradient buffers for both components.
pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
    cls_opt: AdamW,
    gen_opt: Adafactor,
    cls_grads: GradBuffer,
    gen_grads: GradBuffer,
    cls_rng: ChaCha8Rng,
    gen_rng: ChaCha8Rng,
    total_steps: usize,
    warmup_steps: usize,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    pub fn new(bundle: &ModelBundle, config: TrainConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let warmup_steps = (config.warmup_proportion * total_steps as f64).floor() as usize;
        Ok(Self {
            cls_opt: AdamW::new(&bundle.classifier.params, config.weight_decay),
            gen_opt: Adafactor::new(&bundle.generator.params),
            cls_grads: GradBuffer::zeros_like(&bundle.classifier.params),
            gen_grads: GradBuffer::zeros_like(&bundle.generator.params),
            cls_rng: stream_rng(config.seed, 3),
            gen_rng: stream_rng(config.seed, 4),
            state: TrainState::default(),
            total_steps,
            warmup_steps,
            config,
        })
    }

    pub fn learning_rates(&self) -> (f64, f64) {
        let f = linear_schedule(self.state.step, self.warmup_steps, self.total_steps.max(1));
        (self.config.classifier_lr * f, self.config.generator_lr * f)
    }

    /// Forward and backward over one micro-batch; gradients of the loss
    /// divided by `parts` micro-batches (mean reduction) are added to the
    /// buffers.
    pub fn accumulate(&mut self, bundle: &ModelBundle, batch: &[EncodedSample], parts: usize) -> Result<LossReport> {
        let rate = self.config.dropout;
        let mut cls_mode = Mode::Train {
            rng: &mut self.cls_rng,
            rate,
        };
        let mut gen_mode = Mode::Train {
            rng: &mut self.gen_rng,
            rate,
        };
        let sinks = Some((&mut self.cls_grads, &mut self.gen_grads));
        run_batch(
            bundle,
            batch,
            &self.config,
            &mut cls_mode,
            &mut gen_mode,
            sinks,
            parts,
            self.state.step,
        )
    }

    /// Accumulated classifier and generator gradients.
    pub fn gradients(&self) -> (&GradBuffer, &GradBuffer) {
        (&self.cls_grads, &self.gen_grads)
    }

    /// Clips, applies one optimizer step per component and clears the
    /// buffers. Returns the pre-clip gradient norms.
    pub fn apply(&mut self, bundle: &mut ModelBundle) -> (f64, f64) {
        let (cls_lr, gen_lr) = self.learning_rates();
        let clip = self.config.grad_clip_norm;
        let cls_norm = self.cls_grads.clip_global_norm(clip);
        self.cls_opt.step(&mut bundle.classifier.params, &self.cls_grads, cls_lr);
        let mut gen_norm = 0.0;
        if self.config.weights.uses_generator() {
            gen_norm = self.gen_grads.clip_global_norm(clip);
            self.gen_opt.step(&mut bundle.generator.params, &self.gen_grads, gen_lr);
        }
        self.cls_grads.zero();
        self.gen_grads.zero();
        self.state.step += 1;
        (cls_norm, gen_norm)
    }

    /// One optimizer step over `micro_batches` (accumulated). Appends a step
    /// record to the metrics stream.
    pub fn train_step(&mut self, bundle: &mut ModelBundle, micro_batches: &[&[EncodedSample]]) -> Result<LossReport> {
        let parts = micro_batches.len();
        let mut reports = Vec::with_capacity(parts);
        for mb in micro_batches {
            reports.push(self.accumulate(bundle, mb, parts)?);
        }
        let report = combine_reports(&reports, &self.config)?;
        let (classifier_lr, generator_lr) = self.learning_rates();
        let (cn, gn) = self.apply(bundle);
        self.state.metrics.push(MetricRecord::Step {
            step: self.state.step,
            epoch: self.state.epoch,
            loss: report.clone(),
            classifier_lr,
            generator_lr,
            classifier_grad_norm: cn,
            generator_grad_norm: gn,
        });
        Ok(report)
    }
}

fn combine_reports(reports: &[LossReport], config: &TrainConfig) -> Result<LossReport> {
    let mut parts = LossParts::default();
    for r in reports {
        parts.ce += r.ce;
        parts.mle += r.mle;
        parts.ce_g += r.ce_g;
        parts.dis += r.dis;
    }
    if config.reduction == Reduction::Mean {
        let n = reports.len() as f64;
        parts.ce /= n;
        parts.mle /= n;
        parts.ce_g /= n;
        parts.dis /= n;
    }
    LossReport::new(
        parts,
        &config.weights,
        reports.iter().map(|r| r.token_count).sum(),
        reports.iter().map(|r| r.sample_count).sum(),
    )
}

/// Eval-mode losses of one batch, no gradients.
pub fn batch_losses(bundle: &ModelBundle, batch: &[EncodedSample], config: &TrainConfig) -> Result<LossReport> {
    run_batch(bundle, batch, config, &mut Mode::Eval, &mut Mode::Eval, None, 1, 0)
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    bundle: &ModelBundle,
    batch: &[EncodedSample],
    config: &TrainConfig,
    cls_mode: &mut Mode,
    gen_mode: &mut Mode,
    mut sinks: Option<(&mut GradBuffer, &mut GradBuffer)>,
    parts: usize,
    step: usize,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    let w = &config.weights;
    let uses_gen = w.uses_generator();
    let tokens: usize = if uses_gen { batch.iter().map(|s| s.target.len()).sum() } else { 0 };
    let (ns, nt) = match config.reduction {
        Reduction::Mean => ((batch.len() * parts) as f64, (tokens.max(1) * parts) as f64),
        Reduction::Sum => (1.0, 1.0),
    };
    let kl_scale = if config.distill.scale_by_tau_squared { w.tau * w.tau } else { 1.0 };
    let mut sums = LossParts::default();

    for s in batch {
        let mut g = Graph::new();
        let seqs: Vec<&[usize]> = s.inputs.iter().map(Vec::as_slice).collect();
        let p = bundle.classifier.logits(&mut g, &seqs, cls_mode)?;
        let ce = g.cross_entropy(p, &[Some(s.label)]);
        let mut terms: Vec<(Var, f64)> = vec![(ce, w.lambda_ce / ns)];
        let mut values = LossParts {
            ce: g.scalar(ce),
            ..LossParts::default()
        };
        if uses_gen {
            let tgt_in = teacher_forcing_inputs(&s.target);
            let (logits, states) = bundle.generator.forward_graph(&mut g, &s.source, &tgt_in, gen_mode)?;
            let targets: Vec<Option<usize>> = s.target.iter().map(|&t| Some(t)).collect();
            let nll = g.cross_entropy(logits, &targets);
            let rows: Vec<usize> = (0..tgt_in.len()).collect();
            let gl = bundle.generator.label_logits(&mut g, states, &rows)?;
            let ce_g = g.cross_entropy(gl, &[Some(s.label)]);
            let dis = g.kl_div(p, gl, w.tau, config.distill.detach_target);
            values.mle = g.scalar(nll);
            values.ce_g = g.scalar(ce_g);
            values.dis = g.scalar(dis);
            terms.extend([
                (nll, w.lambda_mle / nt),
                (ce_g, w.lambda_ce_g / ns),
                (dis, w.lambda_dis * kl_scale / ns),
            ]);
        }
        if ![values.ce, values.mle, values.ce_g, values.dis].iter().all(|x| x.is_finite()) {
            return Err(Error::Training {
                step,
                report: format!("non-finite loss on a sample: {values:?}"),
            });
        }
        sums.ce += values.ce;
        sums.mle += values.mle;
        sums.ce_g += values.ce_g;
        sums.dis += values.dis;

        if let Some((cls_grads, gen_grads)) = sinks.as_mut() {
            terms.retain(|&(_, weight)| weight != 0.0);
            if terms.is_empty() {
                continue;
            }
            let root = g.weighted_sum(&terms);
            let grads = g.backward(root);
            for (key, m) in grads.params() {
                let buf = match key.component {
                    Component::Classifier => &mut **cls_grads,
                    Component::Generator => &mut **gen_grads,
                };
                buf.grads[key.index] += m;
            }
        }
    }

    let n = batch.len() as f64;
    let parts_out = match config.reduction {
        Reduction::Mean => LossParts {
            ce: sums.ce / n,
            mle: if uses_gen { sums.mle / tokens as f64 } else { 0.0 },
            ce_g: sums.ce_g / n,
            dis: sums.dis / n,
        },
        Reduction::Sum => sums,
    };
    let report = LossReport::new(parts_out, w, tokens, batch.len())?;
    if !report.total.is_finite() {
        return Err(Error::Training {
            step,
            report: format!("non-finite total loss: {report:?}"),
        });
    }
    Ok(report)
}

/// Where `fit` writes metrics and the best checkpoint.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out_dir: Option<PathBuf>,
}

pub struct FitOutcome {
    pub best: ModelBundle,
    pub state: TrainState,
}

struct MetricsSink(Option<BufWriter<File>>);

impl MetricsSink {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else { return Ok(Self(None)) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self(Some(BufWriter::new(f))))
    }

    fn write(&mut self, record: &MetricRecord) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        Ok(())
    }
}

/// Dev accuracy of the classifier path on pre-encoded inputs.
pub fn dev_accuracy(bundle: &ModelBundle, inputs: &[(Vec<Vec<usize>>, usize)]) -> Result<f64> {
    let mut preds = Vec::with_capacity(inputs.len());
    let mut golds = Vec::with_capacity(inputs.len());
    for (ids, gold) in inputs {
        preds.push(predict_encoded(bundle, ids)?);
        golds.push(*gold);
    }
    accuracy(&preds, &golds)
}

/// Trains for `config.epochs` epochs, evaluating dev accuracy before the
/// first epoch and after each one. Returns the parameters with the best dev
/// accuracy (earliest on ties).
pub fn fit(
    mut bundle: ModelBundle,
    train: &[Sample],
    dev: &[Sample],
    config: &TrainConfig,
    options: &FitOptions,
) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Param("training and dev sets must be non-empty".into()));
    }
    if bundle.meta.max_seq_len > bundle.config.max_positions {
        return Err(Error::Param(format!(
            "max_seq_len {} exceeds the model's max_positions {}",
            bundle.meta.max_seq_len, bundle.config.max_positions
        )));
    }
    if let Some(s) = train.iter().chain(dev).find(|s| s.num_labels() != bundle.config.num_labels) {
        return Err(Error::Param(format!(
            "{} has {} labels but the model was built for {}",
            s.id(),
            s.num_labels(),
            bundle.config.num_labels
        )));
    }
    let encoded = encode_samples(&bundle, train)?;
    let dev_inputs: Vec<(Vec<Vec<usize>>, usize)> = dev
        .iter()
        .map(|s| Ok((encode_classifier_inputs(&bundle, s)?, s.label())))
        .collect::<Result<_>>()?;

    let total = config.total_steps(encoded.len());
    let mut trainer = Trainer::new(&bundle, config.clone(), total)?;
    let mut sink = MetricsSink::open(options.out_dir.as_deref())?;
    let mut order_rng = stream_rng(config.seed, 5);
    let mut best = bundle.clone();

    let evaluate = |trainer: &mut Trainer,
                    sink: &mut MetricsSink,
                    bundle: &ModelBundle,
                    best: &mut ModelBundle,
                    epoch: usize|
     -> Result<()> {
        let acc = dev_accuracy(bundle, &dev_inputs)?;
        let improved = trainer.state.best.observe(epoch, acc);
        if improved {
            *best = bundle.clone();
            if let Some(dir) = &options.out_dir {
                let ckpt = dir.join("best");
                let extra = serde_json::json!({ "dev_accuracy": acc, "epoch": epoch, "step": trainer.state.step });
                match save_checkpoint(bundle, &ckpt, extra) {
                    Ok(()) => trainer.state.best_checkpoint = Some(ckpt),
                    Err(e) => trainer.state.checkpoint_errors.push(e.to_string()),
                }
            }
        }
        let record = MetricRecord::Dev {
            step: trainer.state.step,
            epoch,
            accuracy: acc,
            best_accuracy: trainer.state.best.accuracy,
            improved,
        };
        sink.write(&record)?;
        trainer.state.metrics.push(record);
        Ok(())
    };

    evaluate(&mut trainer, &mut sink, &bundle, &mut best, 0)?;
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    for epoch in 1..=config.epochs {
        trainer.state.epoch = epoch;
        order.shuffle(&mut order_rng);
        let micro: Vec<Vec<EncodedSample>> = order
            .chunks(config.batch_size)
            .map(|idx| idx.iter().map(|&i| encoded[i].clone()).collect())
            .collect();
        for group in micro.chunks(config.grad_accumulation_steps) {
            let refs: Vec<&[EncodedSample]> = group.iter().map(Vec::as_slice).collect();
            trainer.train_step(&mut bundle, &refs)?;
            if let Some(rec) = trainer.state.metrics.last() {
                let rec = rec.clone();
                sink.write(&rec)?;
            }
        }
        evaluate(&mut trainer, &mut sink, &bundle, &mut best, epoch)?;
    }
    Ok(FitOutcome {
        best,
        state: trainer.state,
    })
}

#[cfg(test)]
mod tests;
