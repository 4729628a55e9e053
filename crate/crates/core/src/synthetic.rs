//! Copy-key multiple-choice benchmark.
//!
//! Each question hides one key token among filler tokens. Under a decisive
//! sample, the gold option's evidence repeats the key while every other
//! option's evidence holds a distractor that occurs nowhere before the
//! separator. Non-decisive samples give every option distractor evidence;
//! their gold option is instead a fixed function of the key, learnable from
//! the question and option alone. The gold explanation is "{key} {gold}".

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::McqaSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopyKeyConfig {
    #[serde(default = "defaults::num_options")]
    pub num_options: usize,
    /// Distinct content tokens; the first three quarters serve as keys and
    /// options, the rest as fillers.
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: usize,
    /// Longest question, key included.
    #[serde(default = "defaults::question_len")]
    pub question_len: usize,
    /// Shortest question; lengths are drawn uniformly in between.
    #[serde(default = "defaults::min_question_len")]
    pub min_question_len: usize,
    /// Share of samples whose evidence reveals the answer.
    #[serde(default = "defaults::fraction")]
    pub decisive_fraction: f64,
    /// Share of samples that carry a gold explanation.
    #[serde(default = "defaults::fraction")]
    pub explained_fraction: f64,
    /// Attach a question context naming the key.
    #[serde(default)]
    pub with_context: bool,
    /// Seeds the key-to-answer map used by non-decisive samples.
    #[serde(default)]
    pub task_seed: u64,
}

mod defaults {
    pub fn num_options() -> usize {
        4
    }
    pub fn vocab_size() -> usize {
        64
    }
    pub fn question_len() -> usize {
        5
    }
    pub fn min_question_len() -> usize {
        1
    }
    pub fn fraction() -> f64 {
        1.0
    }
}

impl Default for CopyKeyConfig {
    fn default() -> Self {
        Self {
            num_options: defaults::num_options(),
            vocab_size: defaults::vocab_size(),
            question_len: defaults::question_len(),
            min_question_len: defaults::min_question_len(),
            decisive_fraction: 1.0,
            explained_fraction: 1.0,
            with_context: false,
            task_seed: 0,
        }
    }
}

pub fn token(i: usize) -> String {
    format!("w{i}")
}

impl CopyKeyConfig {
    fn pool(&self) -> usize {
        self.vocab_size * 3 / 4
    }

    pub fn validate(&self) -> Result<()> {
        let pool = self.pool();
        let fillers = self.vocab_size - pool;
        if self.num_options < 2 || pool < self.num_options + 3 {
            return Err(Error::Param(format!(
                "vocab of {} is too small for {} options",
                self.vocab_size, self.num_options
            )));
        }
        if self.min_question_len < 1 || self.min_question_len > self.question_len {
            return Err(Error::Param(format!(
                "question lengths {}..={} are empty",
                self.min_question_len, self.question_len
            )));
        }
        if fillers < self.question_len {
            return Err(Error::Param(format!(
                "{} filler tokens cannot fill questions of length {}",
                fillers, self.question_len
            )));
        }
        for (name, f) in [
            ("decisive_fraction", self.decisive_fraction),
            ("explained_fraction", self.explained_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Param(format!("{name} must be in [0, 1], got {f}")));
            }
        }
        Ok(())
    }

    /// Answer token for each key under non-decisive samples.
    fn answer_map(&self) -> Vec<usize> {
        let pool = self.pool();
        let mut rng = ChaCha8Rng::seed_from_u64(self.task_seed ^ 0x006b_6579_5f6d_6170);
        (0..pool)
            .map(|key| loop {
                let a = rng.gen_range(0..pool);
                if a != key {
                    break a;
                }
            })
            .collect()
    }

    /// `n` samples with ids `{prefix}-{i}`.
    pub fn generate(&self, n: usize, seed: u64, prefix: &str) -> Result<Vec<McqaSample>> {
        self.validate()?;
        let pool = self.pool();
        let map = self.answer_map();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let key = rng.gen_range(0..pool);
            let decisive = rng.gen_bool(self.decisive_fraction);
            let explained = rng.gen_bool(self.explained_fraction);

            let mut fillers: Vec<usize> = (pool..self.vocab_size).collect();
            fillers.shuffle(&mut rng);
            let len = rng.gen_range(self.min_question_len..=self.question_len);
            let mut question: Vec<usize> = fillers[..len - 1].to_vec();
            question.insert(rng.gen_range(0..len), key);
            let spare = &fillers[len - 1..];

            let gold = if decisive {
                loop {
                    let t = rng.gen_range(0..pool);
                    if t != key {
                        break t;
                    }
                }
            } else {
                map[key]
            };
            let mut options = vec![gold];
            while options.len() < self.num_options {
                let t = rng.gen_range(0..pool);
                if t != key && !options.contains(&t) {
                    options.push(t);
                }
            }
            options.shuffle(&mut rng);
            let answer_index = options.iter().position(|&o| o == gold).unwrap();

            let evidence = options
                .iter()
                .map(|&o| {
                    let hit = if decisive && o == gold {
                        key
                    } else {
                        loop {
                            let t = rng.gen_range(0..pool);
                            if t != key && t != o {
                                break t;
                            }
                        }
                    };
                    let filler = spare[rng.gen_range(0..spare.len())];
                    let mut pair = [hit, filler];
                    if rng.gen_bool(0.5) {
                        pair.swap(0, 1);
                    }
                    format!("{} {}", token(pair[0]), token(pair[1]))
                })
                .collect();

            out.push(McqaSample {
                id: format!("{prefix}-{i}"),
                question: question.iter().map(|&t| token(t)).collect::<Vec<_>>().join(" "),
                options: options.iter().map(|&o| token(o)).collect(),
                answer_index,
                evidence: Some(evidence),
                question_context: self.with_context.then(|| format!("key {}", token(key))),
                explanation: explained.then(|| format!("{} {}", token(key), token(gold))),
            });
        }
        Ok(out)
    }

    /// Train and dev splits drawn from disjoint seed streams.
    pub fn splits(&self, n_train: usize, n_dev: usize, seed: u64) -> Result<(Vec<McqaSample>, Vec<McqaSample>)> {
        let train = self.generate(n_train, seed.wrapping_mul(2), "train")?;
        let dev = self.generate(n_dev, seed.wrapping_mul(2).wrapping_add(1), "dev")?;
        Ok((train, dev))
    }
}

/// Pairs each sample with the explanation of another sample (a derangement
/// drawn from `seed`).
pub fn shuffled_explanations(samples: &[McqaSample], seed: u64) -> Vec<String> {
    let n = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    if n > 1 {
        loop {
            perm.shuffle(&mut rng);
            if perm.iter().enumerate().all(|(i, &p)| i != p) {
                break;
            }
        }
    }
    perm.iter()
        .map(|&p| samples[p].explanation.clone().unwrap_or_default())
        .collect()
}
