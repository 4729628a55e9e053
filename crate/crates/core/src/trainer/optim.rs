//! AdamW, Adafactor and the warmup/decay schedule.

use ndarray::Axis;

use crate::netcore::graph::Mat;
use crate::netcore::params::{GradBuffer, ParamStore};

/// Linear warmup over `warmup` steps, then linear decay to zero at `total`.
/// `step` is zero-based.
pub fn linear_schedule(step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else if total <= warmup {
        1.0
    } else {
        (total.saturating_sub(step)) as f64 / (total - warmup) as f64
    }
}

/// Decoupled weight decay Adam. Row vectors (biases, norm gains) are not
/// decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Mat::zeros(p.dim())).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, g) in grads.grads.iter().enumerate() {
            let p = store.value_mut(i);
            let decay = if p.nrows() > 1 { self.weight_decay } else { 0.0 };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p -= lr * (update + decay * *p);
                });
        }
    }
}

enum Moment {
    Factored { row: Mat, col: Mat },
    Full(Mat),
}

/// Adafactor with factored second moments, decay `1 - t^-0.8`, update RMS
/// clipping at 1, no momentum and an externally supplied learning rate.
pub struct Adafactor {
    pub eps: f64,
    pub clip_threshold: f64,
    pub decay_rate: f64,
    moments: Vec<Moment>,
    t: i32,
}

impl Adafactor {
    pub fn new(store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| {
                if p.nrows() > 1 && p.ncols() > 1 {
                    Moment::Factored {
                        row: Mat::zeros((p.nrows(), 1)),
                        col: Mat::zeros((1, p.ncols())),
                    }
                } else {
                    Moment::Full(Mat::zeros(p.dim()))
                }
            })
            .collect();
        Self {
            eps: 1e-30,
            clip_threshold: 1.0,
            decay_rate: 0.8,
            moments,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.t += 1;
        let beta2 = 1.0 - (self.t as f64).powf(-self.decay_rate);
        for (i, g) in grads.grads.iter().enumerate() {
            let sq = g.mapv(|x| x * x + self.eps);
            let mut update = match &mut self.moments[i] {
                Moment::Factored { row, col } => {
                    let r = sq.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
                    let c = sq.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
                    *row = &*row * beta2 + &(r * (1.0 - beta2));
                    *col = &*col * beta2 + &(c * (1.0 - beta2));
                    let row_mean = row.mean().unwrap();
                    let v = row.dot(&*col) / row_mean;
                    g / &v.mapv(f64::sqrt)
                }
                Moment::Full(v) => {
                    *v = &*v * beta2 + &(sq * (1.0 - beta2));
                    g / &v.mapv(f64::sqrt)
                }
            };
            let rms = (update.iter().map(|x| x * x).sum::<f64>() / update.len() as f64).sqrt();
            let denom = (rms / self.clip_threshold).max(1.0);
            update.mapv_inplace(|x| x / denom);
            store.value_mut(i).scaled_add(-lr, &update);
        }
    }
}
