//! The three learned heads: option scoring, token projection and the
//! generator's max-pooled label head.
//!
//! Each head has a graph-level function used inside the models and a
//! value-level wrapper for standalone use.

use super::graph::{softmax_row, Graph, Mat, Var};
use crate::error::{Error, Result};

/// `W2 · tanh(W1 · h + b1)` with W1: d×d, b1: 1×d, W2: out×d.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
}

/// Token logits `W · h + b2` with W: V×d.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenProjection {
    pub w: Mat,
    pub b2: Mat,
}

/// Per-step projection to K label logits followed by a max over time.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLabelHead {
    pub w3: Mat,
    pub b3: Mat,
}

/// Rows of `h` (n × d) to scores (n × out). No outer bias.
pub fn prediction_head(g: &mut Graph, h: Var, w1: Var, b1: Var, w2: Var) -> Var {
    let z = g.matmul_bt(h, w1);
    let z = g.add_row(z, b1);
    let t = g.tanh(z);
    g.matmul_bt(t, w2)
}

pub fn token_projection(g: &mut Graph, states: Var, w: Var, b2: Var) -> Var {
    let z = g.matmul_bt(states, w);
    g.add_row(z, b2)
}

/// `rows` lists the unmasked decoder positions to pool over.
pub fn label_head(g: &mut Graph, states: Var, w3: Var, b3: Var, rows: &[usize]) -> Var {
    let z = g.matmul_bt(states, w3);
    let z = g.add_row(z, b3);
    g.max_pool_rows(z, rows)
}

fn as_row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

impl PredictionHead {
    pub fn check(&self) -> Result<()> {
        let d = self.w1.ncols();
        if self.w1.nrows() != d || self.b1.dim() != (1, d) || self.w2.ncols() != d {
            return Err(Error::Shape(format!(
                "prediction head shapes W1 {:?}, b1 {:?}, W2 {:?}",
                self.w1.dim(),
                self.b1.dim(),
                self.w2.dim()
            )));
        }
        Ok(())
    }
}

/// Scores one hidden vector; returns `W2 · tanh(W1 h + b1)` (one entry per
/// output row of `W2`, a single score for per-option heads).
pub fn score_option(h: &[f64], head: &PredictionHead) -> Result<Vec<f64>> {
    head.check()?;
    if h.len() != head.w1.ncols() {
        return Err(Error::Shape(format!("hidden size {} vs head {}", h.len(), head.w1.ncols())));
    }
    let mut g = Graph::new();
    let hv = g.input(as_row(h));
    let w1 = g.input(head.w1.clone());
    let b1 = g.input(head.b1.clone());
    let w2 = g.input(head.w2.clone());
    let out = prediction_head(&mut g, hv, w1, b1, w2);
    Ok(g.value(out).row(0).to_vec())
}

/// Softmax across options (max-subtracted).
pub fn option_distribution(scores: &[f64]) -> Vec<f64> {
    softmax_row(scores)
}

/// `g_k = max_t (W3 h_t + b3)_k` over unmasked rows of `states` (T × d).
pub fn generator_label_logits(states: &Mat, head: &GeneratorLabelHead, mask: &[bool]) -> Result<Vec<f64>> {
    if mask.len() != states.nrows() {
        return Err(Error::Shape(format!(
            "mask length {} for {} decoder states",
            mask.len(),
            states.nrows()
        )));
    }
    if head.w3.ncols() != states.ncols() || head.b3.dim() != (1, head.w3.nrows()) {
        return Err(Error::Shape("label head does not match decoder width".into()));
    }
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::Pooling("every decoder position is masked".into()));
    }
    let mut g = Graph::new();
    let s = g.input(states.clone());
    let w3 = g.input(head.w3.clone());
    let b3 = g.input(head.b3.clone());
    let out = label_head(&mut g, s, w3, b3, &rows);
    Ok(g.value(out).row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn head(w1: Mat, b1: Mat, w2: Mat) -> PredictionHead {
        PredictionHead { w1, b1, w2 }
    }

    #[test]
    fn zero_weights_score_zero() {
        let h = head(Mat::zeros((3, 3)), Mat::zeros((1, 3)), array![[1.0, -2.0, 3.0]]);
        assert_eq!(score_option(&[0.4, 5.0, -1.0], &h).unwrap(), vec![0.0]);
    }

    #[test]
    fn identity_at_origin() {
        let h = head(Mat::eye(2), Mat::zeros((1, 2)), array![[1.0, 1.0]]);
        assert_eq!(score_option(&[0.0, 0.0], &h).unwrap(), vec![0.0]);
    }

    #[test]
    fn hand_computed_score() {
        let h = head(Mat::eye(2), array![[1.0, -1.0]], array![[2.0, 3.0]]);
        let s = score_option(&[0.0, 0.0], &h).unwrap()[0];
        // 2 tanh(1) + 3 tanh(-1) = -tanh(1)
        assert!((s - (-0.761_594_155_955_764_9)).abs() < 1e-12);
        assert!((s - (-0.7616)).abs() < 1e-4);
    }

    #[test]
    fn distribution_properties() {
        let u = option_distribution(&[0.0; 5]);
        assert!(u.iter().all(|p| (p - 0.2).abs() < 1e-15));
        let a = option_distribution(&[1.0, 2.0]);
        let b = option_distribution(&[101.0, 102.0]);
        assert!((a[0] - b[0]).abs() < 1e-15);
        // e / (e + e^2) = 1 / (1 + e)
        assert!((a[0] - 1.0 / (1.0 + std::f64::consts::E)).abs() < 1e-15);
        assert!((a[0] - 0.2689).abs() < 1e-4 && (a[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn label_logits_pool_over_time() {
        let lh = GeneratorLabelHead {
            w3: Mat::eye(2),
            b3: Mat::zeros((1, 2)),
        };
        // states as rows: h1 = [1,0], h2 = [0,2]
        let states = array![[1.0, 0.0], [0.0, 2.0]];
        assert_eq!(generator_label_logits(&states, &lh, &[true, true]).unwrap(), vec![1.0, 2.0]);

        let single = array![[0.5, -0.25]];
        let lh2 = GeneratorLabelHead {
            w3: array![[1.0, 2.0], [3.0, -1.0]],
            b3: array![[0.1, 0.2]],
        };
        assert_eq!(
            generator_label_logits(&single, &lh2, &[true]).unwrap(),
            vec![0.5 - 0.5 + 0.1, 1.5 + 0.25 + 0.2]
        );

        let padded = array![[1.0, 0.0], [0.0, 2.0], [9.0, 9.0]];
        assert_eq!(
            generator_label_logits(&padded, &lh, &[true, true, false]).unwrap(),
            vec![1.0, 2.0]
        );
        assert!(matches!(
            generator_label_logits(&states, &lh, &[false, false]),
            Err(Error::Pooling(_))
        ));
    }
}
