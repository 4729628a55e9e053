//! The four loss terms and their weighted sum.
//!
//! Batch losses are means by default (over samples for the label terms, over
//! target tokens for the likelihood term) so that the weights do not depend
//! on batch size; [`Reduction::Sum`] restores plain sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::graph::{Graph, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub lambda_ce: f64,
    #[serde(default = "one")]
    pub lambda_mle: f64,
    #[serde(default = "one")]
    pub lambda_ce_g: f64,
    #[serde(default = "one")]
    pub lambda_dis: f64,
    /// Distillation temperature τ.
    #[serde(default = "one")]
    pub tau: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0, 1.0)
    }
}

impl LossWeights {
    pub fn new(lambda_ce: f64, lambda_mle: f64, lambda_ce_g: f64, lambda_dis: f64) -> Self {
        Self {
            lambda_ce,
            lambda_mle,
            lambda_ce_g,
            lambda_dis,
            tau: 1.0,
        }
    }

    /// Only the classification term.
    pub fn classifier_only() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    /// Whether any term touches the generator.
    pub fn uses_generator(&self) -> bool {
        self.lambda_mle != 0.0 || self.lambda_ce_g != 0.0 || self.lambda_dis != 0.0
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_mle", self.lambda_mle),
            ("lambda_ce_g", self.lambda_ce_g),
            ("lambda_dis", self.lambda_dis),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            out.push(format!("tau must be positive, got {}", self.tau));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Switches on the KL bridge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillOptions {
    /// Stop gradients into the generator label logits.
    #[serde(default)]
    pub detach_target: bool,
    /// Multiply the KL term by τ².
    #[serde(default)]
    pub scale_by_tau_squared: bool,
}

/// The four unweighted terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub mle: f64,
    pub ce_g: f64,
    pub dis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub mle: f64,
    pub ce_g: f64,
    pub dis: f64,
    pub total: f64,
    pub token_count: usize,
    pub sample_count: usize,
}

impl LossReport {
    pub fn new(parts: LossParts, weights: &LossWeights, token_count: usize, sample_count: usize) -> Result<Self> {
        let total = total_loss(&parts, weights)?;
        Ok(Self {
            ce: parts.ce,
            mle: parts.mle,
            ce_g: parts.ce_g,
            dis: parts.dis,
            total,
            token_count,
            sample_count,
        })
    }

    pub fn parts(&self) -> LossParts {
        LossParts {
            ce: self.ce,
            mle: self.mle,
            ce_g: self.ce_g,
            dis: self.dis,
        }
    }
}

fn check_answers(logits: &Mat, answers: &[usize]) -> Result<()> {
    if logits.nrows() != answers.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} answers",
            logits.nrows(),
            answers.len()
        )));
    }
    if let Some(&a) = answers.iter().find(|&&a| a >= logits.ncols()) {
        return Err(Error::Shape(format!("answer {a} outside {} options", logits.ncols())));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Loss("non-finite score".into()));
    }
    Ok(())
}

/// Mean over samples of `−log softmax(scores_i)[answer_i]` (N × K scores).
pub fn classification_loss(scores: &Mat, answers: &[usize]) -> Result<f64> {
    check_answers(scores, answers)?;
    if answers.is_empty() {
        return Err(Error::Loss("empty batch".into()));
    }
    let mut g = Graph::new();
    let s = g.input(scores.clone());
    let targets: Vec<Option<usize>> = answers.iter().map(|&a| Some(a)).collect();
    let ce = g.cross_entropy(s, &targets);
    Ok(g.scalar(ce) / answers.len() as f64)
}

/// Same contract as [`classification_loss`], applied to generator label
/// logits.
pub fn generator_label_loss(logits: &Mat, answers: &[usize]) -> Result<f64> {
    classification_loss(logits, answers)
}

/// Token-mean negative log-likelihood over unmasked target positions.
pub fn mle_loss(logits: &Mat, targets: &[usize], mask: &[bool]) -> Result<f64> {
    if logits.nrows() != targets.len() || targets.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.nrows(),
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Loss("no unmasked target positions".into()));
    }
    if let Some(&t) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= logits.ncols()).map(|(t, _)| t) {
        return Err(Error::Shape(format!("target id {t} outside vocabulary")));
    }
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let t: Vec<Option<usize>> = targets.iter().zip(mask).map(|(&t, &m)| m.then_some(t)).collect();
    let nll = g.cross_entropy(l, &t);
    Ok(g.scalar(nll) / count as f64)
}

/// Mean over samples of KL(softmax(g/τ) ‖ softmax(p/τ)).
pub fn distillation_loss(classifier_logits: &Mat, generator_logits: &Mat, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    if classifier_logits.dim() != generator_logits.dim() || classifier_logits.nrows() == 0 {
        return Err(Error::Shape(format!(
            "classifier logits {:?} vs generator logits {:?}",
            classifier_logits.dim(),
            generator_logits.dim()
        )));
    }
    let mut g = Graph::new();
    let p = g.input(classifier_logits.clone());
    let q = g.input(generator_logits.clone());
    let kl = g.kl_div(p, q, tau, false);
    Ok(g.scalar(kl) / classifier_logits.nrows() as f64)
}

/// `λ1·ce + λ2·mle + λ3·ce_g + λ4·dis`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    let terms = [parts.ce, parts.mle, parts.ce_g, parts.dis];
    if terms.iter().any(|x| x.is_nan()) {
        return Err(Error::Loss(format!("NaN loss term in {parts:?}")));
    }
    Ok(weights.lambda_ce * parts.ce
        + weights.lambda_mle * parts.mle
        + weights.lambda_ce_g * parts.ce_g
        + weights.lambda_dis * parts.dis)
}
