//! Beam search and greedy decoding with a repetition penalty.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{inference_source, strip_explanation_prefix, Sample};
use crate::error::{Error, Result};
use crate::netcore::graph::{log_softmax_row, Mat};
use crate::netcore::{Generator, ModelBundle, DECODER_START};
use crate::tokenizer::{Tokenizer, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    #[serde(default = "defaults::beams")]
    pub beams: usize,
    #[serde(default = "defaults::max_len")]
    pub max_len: usize,
    #[serde(default = "defaults::repetition_penalty")]
    pub repetition_penalty: f64,
    #[serde(default = "defaults::num_return")]
    pub num_return: usize,
    #[serde(default)]
    pub length_normalization_alpha: f64,
}

mod defaults {
    pub fn beams() -> usize {
        20
    }
    pub fn max_len() -> usize {
        200
    }
    pub fn repetition_penalty() -> f64 {
        1.5
    }
    pub fn num_return() -> usize {
        1
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beams: defaults::beams(),
            max_len: defaults::max_len(),
            repetition_penalty: defaults::repetition_penalty(),
            num_return: defaults::num_return(),
            length_normalization_alpha: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beams == 0 {
            return Err(Error::Param("beams must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Param("max_len must be at least 1".into()));
        }
        if self.num_return == 0 || self.num_return > self.beams {
            return Err(Error::Param(format!(
                "num_return must be in 1..={}, got {}",
                self.beams, self.num_return
            )));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::Param(format!(
                "repetition penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        if !(self.length_normalization_alpha >= 0.0) {
            return Err(Error::Param("length normalization alpha must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids, without the decoder start symbol; ends with EOS when
    /// the hypothesis finished on it.
    pub ids: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / len^alpha`, equal to `log_prob` when alpha is 0.
    pub score: f64,
    pub finished: bool,
}

/// Source of next-token logits for a partially generated sequence.
pub trait StepModel {
    /// Logits over the vocabulary for the token after `generated`.
    fn next_logits(&self, generated: &[usize]) -> Result<Vec<f64>>;

    fn eos(&self) -> usize {
        EOS
    }
}

/// A generator with its source already encoded.
pub struct GeneratorSteps<'g> {
    generator: &'g Generator,
    memory: Mat,
}

impl<'g> GeneratorSteps<'g> {
    pub fn new(generator: &'g Generator, src: &[usize]) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::Shape("empty source sequence".into()));
        }
        Ok(Self {
            generator,
            memory: generator.encode_source(src)?,
        })
    }
}

impl StepModel for GeneratorSteps<'_> {
    fn next_logits(&self, generated: &[usize]) -> Result<Vec<f64>> {
        let mut prefix = Vec::with_capacity(generated.len() + 1);
        prefix.push(DECODER_START);
        prefix.extend_from_slice(generated);
        self.generator.next_token_logits(&self.memory, &prefix)
    }
}

/// Divides positive logits and multiplies non-positive ones by `theta` for
/// every id in `generated`.
pub fn apply_repetition_penalty(logits: &[f64], generated: &HashSet<usize>, theta: f64) -> Result<Vec<f64>> {
    if !(theta >= 1.0) {
        return Err(Error::Param(format!("repetition penalty must be >= 1, got {theta}")));
    }
    let mut out = logits.to_vec();
    for &id in generated {
        if let Some(x) = out.get_mut(id) {
            *x = if *x > 0.0 { *x / theta } else { *x * theta };
        }
    }
    Ok(out)
}

fn step_log_probs(model: &impl StepModel, ids: &[usize], theta: f64) -> Result<Vec<f64>> {
    let logits = model.next_logits(ids)?;
    let seen: HashSet<usize> = ids.iter().copied().collect();
    let penalized = apply_repetition_penalty(&logits, &seen, theta)?;
    let lp = log_softmax_row(&penalized);
    if lp.iter().any(|x| x.is_nan()) {
        return Err(Error::Decode(ids.len()));
    }
    Ok(lp)
}

fn normalize(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len as f64).powf(alpha)
    }
}

/// Beam search over any [`StepModel`]. Returns `num_return` hypotheses sorted
/// by score, best first.
pub fn beam_search_with(model: &impl StepModel, config: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let eos = model.eos();
    let alpha = config.length_normalization_alpha;
    let mut live = vec![Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
        score: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for len in 1..=config.max_len {
        // (score, token, beam index, log_prob)
        let mut candidates: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (b, hyp) in live.iter().enumerate() {
            let lp = step_log_probs(model, &hyp.ids, config.repetition_penalty)?;
            for (tok, l) in lp.into_iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let log_prob = hyp.log_prob + l;
                candidates.push((normalize(log_prob, len, alpha), tok, b, log_prob));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });

        let mut next = Vec::with_capacity(config.beams);
        for (rank, &(score, tok, b, log_prob)) in candidates.iter().enumerate() {
            if next.len() == config.beams {
                break;
            }
            let done = tok == eos || len == config.max_len;
            if done && rank >= config.beams {
                continue;
            }
            let mut ids = live[b].ids.clone();
            ids.push(tok);
            let hyp = Hypothesis {
                ids,
                log_prob,
                score,
                finished: done,
            };
            if done {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if finished.len() >= config.beams {
            let worst = finished
                .iter()
                .map(|h| h.score)
                .fold(f64::INFINITY, f64::min);
            // Log-probabilities only fall, so a live beam's best reachable
            // score is its current log_prob at the longest length.
            let best_live = live
                .iter()
                .map(|h| {
                    if alpha == 0.0 {
                        h.log_prob
                    } else {
                        normalize(h.log_prob, config.max_len, alpha)
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if best_live <= worst {
                break;
            }
        }
    }

    if finished.is_empty() {
        return Err(Error::Decode(config.max_len));
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score));
    finished.truncate(config.num_return);
    Ok(finished)
}

/// Beam search from a generator over `src`.
pub fn beam_search(generator: &Generator, src: &[usize], config: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    beam_search_with(&GeneratorSteps::new(generator, src)?, config)
}

/// Repeatedly takes the highest penalized logit (lowest id on ties) until
/// EOS or `max_len` tokens.
pub fn greedy_decode_with(model: &impl StepModel, max_len: usize, theta: f64) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Param("max_len must be at least 1".into()));
    }
    let eos = model.eos();
    let mut ids = Vec::new();
    let mut log_prob = 0.0;
    loop {
        let lp = step_log_probs(model, &ids, theta)?;
        let mut best = 0;
        for (i, &l) in lp.iter().enumerate() {
            if l > lp[best] {
                best = i;
            }
        }
        log_prob += lp[best];
        ids.push(best);
        if best == eos || ids.len() == max_len {
            break;
        }
    }
    Ok(Hypothesis {
        ids,
        log_prob,
        score: log_prob,
        finished: true,
    })
}

pub fn greedy_decode(generator: &Generator, src: &[usize], max_len: usize, theta: f64) -> Result<Hypothesis> {
    greedy_decode_with(&GeneratorSteps::new(generator, src)?, max_len, theta)
}

/// A decoded explanation with its template prefix removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub text: String,
    pub log_prob: f64,
}

/// Beam-searches explanations for one sample, best first.
pub fn explain(bundle: &ModelBundle, sample: &Sample, config: &DecodeConfig) -> Result<Vec<Explanation>> {
    let source = inference_source(sample, bundle.meta.generator_format);
    let max_len = bundle.meta.max_seq_len;
    let mut src = bundle.generator_vocab.encode(&source, max_len.saturating_sub(1).max(1));
    src.push(EOS);
    beam_search(&bundle.generator, &src, config)?
        .into_iter()
        .map(|h| {
            let text = bundle.generator_vocab.decode(&h.ids)?;
            Ok(Explanation {
                text: strip_explanation_prefix(&text).to_string(),
                log_prob: h.log_prob,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn penalty_examples() {
        let logits = [3.0, -1.0, 0.5];
        let all: HashSet<usize> = [0, 1, 2].into_iter().collect();
        assert_eq!(apply_repetition_penalty(&logits, &all, 1.0).unwrap(), logits.to_vec());
        let seen: HashSet<usize> = [0, 1].into_iter().collect();
        assert_eq!(apply_repetition_penalty(&logits, &seen, 1.5).unwrap(), vec![2.0, -1.5, 0.5]);
        assert!(matches!(apply_repetition_penalty(&logits, &seen, 0.9), Err(Error::Param(_))));
    }

    /// Logits looked up by prefix; unknown prefixes strongly prefer EOS.
    struct Table {
        vocab: usize,
        rows: HashMap<Vec<usize>, Vec<f64>>,
    }

    impl StepModel for Table {
        fn next_logits(&self, generated: &[usize]) -> Result<Vec<f64>> {
            Ok(self.rows.get(generated).cloned().unwrap_or_else(|| {
                let mut v = vec![0.0; self.vocab];
                v[EOS] = 10.0;
                v
            }))
        }
    }

    fn repeat_prone() -> Table {
        let mut rows = HashMap::new();
        let mut first = vec![0.0; 10];
        first[7] = 3.0;
        rows.insert(vec![], first);
        let mut second = vec![0.0; 10];
        second[7] = 2.0;
        second[5] = 1.5;
        rows.insert(vec![7], second);
        Table { vocab: 10, rows }
    }

    #[test]
    fn penalty_stops_repeat() {
        let m = repeat_prone();
        let cfg = |theta| DecodeConfig {
            beams: 1,
            max_len: 3,
            repetition_penalty: theta,
            ..DecodeConfig::default()
        };
        let plain = beam_search_with(&m, &cfg(1.0)).unwrap();
        assert_eq!(plain[0].ids, vec![7, 7, EOS]);
        // 2.0 / 1.5 = 1.33 falls below the runner-up 1.5
        let penalized = beam_search_with(&m, &cfg(1.5)).unwrap();
        assert_eq!(penalized[0].ids, vec![7, 5, EOS]);
    }

    #[test]
    fn finishes_at_max_len() {
        let m = repeat_prone();
        let cfg = DecodeConfig {
            beams: 3,
            max_len: 2,
            repetition_penalty: 1.0,
            num_return: 3,
            ..DecodeConfig::default()
        };
        let out = beam_search_with(&m, &cfg).unwrap();
        assert_eq!(out.len(), 3);
        for h in &out {
            assert!(h.finished);
            assert!(h.ids.len() == 2 || h.ids.last() == Some(&EOS));
        }
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn config_errors() {
        let m = repeat_prone();
        let bad = DecodeConfig {
            max_len: 0,
            ..DecodeConfig::default()
        };
        assert!(matches!(beam_search_with(&m, &bad), Err(Error::Param(_))));
        let bad = DecodeConfig {
            num_return: 21,
            ..DecodeConfig::default()
        };
        assert!(matches!(beam_search_with(&m, &bad), Err(Error::Param(_))));
    }

    #[test]
    fn beam_one_is_greedy_on_table() {
        let m = repeat_prone();
        for theta in [1.0, 1.5] {
            let cfg = DecodeConfig {
                beams: 1,
                max_len: 5,
                repetition_penalty: theta,
                ..DecodeConfig::default()
            };
            let b = beam_search_with(&m, &cfg).unwrap();
            let g = greedy_decode_with(&m, 5, theta).unwrap();
            assert_eq!(b[0].ids, g.ids);
        }
    }
}
