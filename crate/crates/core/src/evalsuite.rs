//! Accuracy, corpus BLEU and probe-based simulatability.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_classifier_inputs, normalize_whitespace, ClassifierMode, McqaSample, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::netcore::{BundleMeta, ModelBundle, ModelConfig};
use crate::objective::LossWeights;
use crate::tokenizer::{build_vocab, Tokenizer};
use crate::trainer::{argmax, fit, FitOptions, TrainConfig};

pub fn accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() || golds.is_empty() {
        return Err(Error::Eval(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let correct = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / golds.len() as f64)
}

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU on a 0–100 scale: clipped n-gram precisions up to 4-grams
/// pooled over the corpus, geometric mean, brevity penalty against the
/// closest reference length (shorter on ties). Orders above 1 with no match
/// are smoothed to `1 / (total + 1)`.
pub fn corpus_bleu(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Eval(format!(
            "{} candidates for {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Eval("every candidate needs at least one reference".into()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        let cand = normalize_whitespace(cand);
        let c: Vec<&str> = cand.split_whitespace().collect();
        let refs: Vec<String> = refs.iter().map(|r| normalize_whitespace(r)).collect();
        let rs: Vec<Vec<&str>> = refs.iter().map(|r| r.split_whitespace().collect()).collect();
        cand_len += c.len();
        ref_len += rs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .unwrap_or(0);
        for n in 1..=MAX_ORDER {
            let cc = ngram_counts(&c, n);
            let mut max_ref: HashMap<Vec<String>, usize> = HashMap::new();
            for r in &rs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cc {
                matches[n - 1] += k.min(max_ref.get(&g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    if cand_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let p = if matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else {
            1.0 / (totals[n] + 1) as f64
        };
        log_sum += p.ln();
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / MAX_ORDER as f64).exp())
}

/// How each simulatability probe is built and trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Tail share of the probe training data held out for checkpoint
    /// selection.
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
}

fn default_dev_fraction() -> f64 {
    0.1
}

fn default_max_vocab() -> usize {
    32_000
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dev_fraction: default_dev_fraction(),
            max_vocab: default_max_vocab(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub retried: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatabilityReport {
    /// Mean over the probes that trained successfully.
    pub accuracy_ye: f64,
    pub probes: Vec<ProbeResult>,
}

/// A trained probe. Probes are trained once and can be evaluated on several
/// explanation sets.
pub struct Probe {
    pub bundle: ModelBundle,
    pub seed: u64,
    pub retried: bool,
}

fn train_probe(probe_train: &[McqaSample], config: &ProbeConfig, seed: u64) -> Result<ModelBundle> {
    let samples: Vec<Sample> = probe_train
        .iter()
        .map(|s| {
            let mut s = s.clone();
            // Probes never see explanations.
            s.explanation = None;
            Sample::Mcqa(s)
        })
        .collect();
    let n_dev = ((samples.len() as f64) * config.dev_fraction).round() as usize;
    let n_dev = n_dev.clamp(1, samples.len().saturating_sub(1).max(1));
    if samples.len() < 2 {
        return Err(Error::Eval("probe training needs at least two samples".into()));
    }
    let (train, dev) = samples.split_at(samples.len() - n_dev);
    let meta = BundleMeta {
        classifier_mode: ClassifierMode::QaEvidence,
        max_seq_len: config.train.max_seq_len,
        ..BundleMeta::default()
    };
    let mut texts = Vec::new();
    for s in train {
        for c in build_classifier_inputs(s, ClassifierMode::QaEvidence, &meta.symbols)? {
            texts.push(c.input_text);
        }
    }
    let cls_vocab = build_vocab(&texts, config.max_vocab)?;
    let gen_vocab = build_vocab(&["unused"], 6)?;
    let mut model = config.model.clone();
    model.task = TaskKind::Mcqa;
    model.num_labels = train[0].num_labels();
    let bundle = ModelBundle::new(model, meta, cls_vocab, gen_vocab, seed)?;
    let train_cfg = TrainConfig {
        seed,
        weights: LossWeights::classifier_only(),
        ..config.train.clone()
    };
    Ok(fit(bundle, train, dev, &train_cfg, &FitOptions::default())?.best)
}

/// Trains `num_probes` classifier-only probes on question+option+evidence
/// inputs, seeds `base_seed`, `base_seed + 1`, .... A probe whose training
/// diverges is retried once with a fresh seed; a second failure is recorded.
pub fn train_probes(
    probe_train: &[McqaSample],
    config: &ProbeConfig,
    num_probes: usize,
    base_seed: u64,
) -> Result<Vec<std::result::Result<Probe, ProbeResult>>> {
    if num_probes == 0 {
        return Err(Error::Eval("num_probes must be at least 1".into()));
    }
    if let Some(s) = probe_train.iter().find(|s| s.evidence.is_none()) {
        return Err(Error::Eval(format!("probe training sample {} has no evidence", s.id)));
    }
    let mut out = Vec::with_capacity(num_probes);
    for i in 0..num_probes as u64 {
        let seed = base_seed + i;
        match train_probe(probe_train, config, seed) {
            Ok(bundle) => out.push(Ok(Probe {
                bundle,
                seed,
                retried: false,
            })),
            Err(Error::Training { .. }) => {
                let retry_seed = seed + 1_000_003;
                match train_probe(probe_train, config, retry_seed) {
                    Ok(bundle) => out.push(Ok(Probe {
                        bundle,
                        seed: retry_seed,
                        retried: true,
                    })),
                    Err(e @ Error::Training { .. }) => out.push(Err(ProbeResult {
                        seed: retry_seed,
                        accuracy: None,
                        retried: true,
                        error: Some(e.to_string()),
                    })),
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Accuracy of one probe on option+explanation inputs with the question
/// removed.
pub fn probe_accuracy(probe: &ModelBundle, eval: &[(McqaSample, String)]) -> Result<f64> {
    let mut preds = Vec::with_capacity(eval.len());
    let mut golds = Vec::with_capacity(eval.len());
    for (sample, explanation) in eval {
        let mut s = sample.clone();
        s.explanation = Some(explanation.clone());
        let inputs = build_classifier_inputs(&Sample::Mcqa(s), ClassifierMode::ProbeTest, &probe.meta.symbols)?;
        let ids: Vec<Vec<usize>> = inputs
            .iter()
            .map(|c| probe.classifier_vocab.encode(&c.input_text, probe.meta.max_seq_len))
            .collect();
        let seqs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
        preds.push(argmax(&probe.classifier.predict_logits(&seqs)?));
        golds.push(sample.answer_index);
    }
    accuracy(&preds, &golds)
}

/// Scores already trained probes; failed probes are carried through.
pub fn score_probes(
    probes: &[std::result::Result<Probe, ProbeResult>],
    eval: &[(McqaSample, String)],
) -> Result<SimulatabilityReport> {
    let mut results = Vec::with_capacity(probes.len());
    for p in probes {
        results.push(match p {
            Ok(probe) => ProbeResult {
                seed: probe.seed,
                accuracy: Some(probe_accuracy(&probe.bundle, eval)?),
                retried: probe.retried,
                error: None,
            },
            Err(failed) => failed.clone(),
        });
    }
    let ok: Vec<f64> = results.iter().filter_map(|r| r.accuracy).collect();
    if ok.is_empty() {
        return Err(Error::Eval("every simulatability probe failed to train".into()));
    }
    Ok(SimulatabilityReport {
        accuracy_ye: ok.iter().sum::<f64>() / ok.len() as f64,
        probes: results,
    })
}

/// Mean probe accuracy on `eval` explanations (Accuracy_y(e)).
pub fn simulatability(
    probe_train: &[McqaSample],
    eval: &[(McqaSample, String)],
    config: &ProbeConfig,
    num_probes: usize,
    base_seed: u64,
) -> Result<SimulatabilityReport> {
    if eval.is_empty() {
        return Err(Error::Eval("no explanations to evaluate".into()));
    }
    let probes = train_probes(probe_train, config, num_probes, base_seed)?;
    score_probes(&probes, eval)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub samples: usize,
    pub correct: Option<usize>,
    pub bleu_candidates: Option<usize>,
    pub simulatability_samples: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: Option<f64>,
    pub bleu: Option<f64>,
    pub accuracy_ye: Option<f64>,
    pub probes: Vec<ProbeResult>,
    pub counts: EvalCounts,
}
