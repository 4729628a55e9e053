//! Pre-norm transformer blocks over the [`Graph`] tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mat, Var, MASKED};
use super::params::{random_normal, ParamStore};

/// Forward-pass mode. Dropout is only active in `Train`.
pub enum Mode<'r> {
    Eval,
    Train { rng: &'r mut ChaCha8Rng, rate: f64 },
}

impl Mode<'_> {
    pub fn dropout<'a>(&mut self, g: &mut Graph<'a>, x: Var) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train { rate, .. } if *rate <= 0.0 => x,
            Mode::Train { rng, rate } => {
                let keep = 1.0 / (1.0 - *rate);
                let p = *rate;
                let mask = g
                    .value(x)
                    .mapv(|_| if rng.gen::<f64>() < p { 0.0 } else { keep });
                g.dropout(x, mask)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize) -> Self {
        let w = store.add(format!("{name}.w"), random_normal(rng, out, inp, 1.0 / (inp as f64).sqrt()));
        let b = store.add(format!("{name}.b"), Mat::zeros((1, out)));
        Self { w, b }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul_bt(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.g"), Mat::ones((1, d)));
        let bias = store.add(format!("{name}.b"), Mat::zeros((1, d)));
        Self { gain, bias }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            heads,
        }
    }

    /// `mask` is additive, shaped (query rows × key rows).
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        queries: Var,
        keys: Var,
        mask: &Mat,
    ) -> Var {
        let q = self.q.forward(g, store, queries);
        let k = self.k.forward(g, store, keys);
        let v = self.v.forward(g, store, keys);
        let d = g.value(q).ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let scores = g.add_const(scores, mask);
            let weights = g.softmax_rows(scores);
            outs.push(g.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, store, joined)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), hidden, d),
            down: Linear::new(store, rng, &format!("{name}.down"), d, hidden),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize, ffn: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, ffn),
        }
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        mask: &Mat,
        mode: &mut Mode,
    ) -> Var {
        let h = self.ln_attn.forward(g, store, x);
        let h = self.attn.forward(g, store, h, h, mask);
        let h = mode.dropout(g, h);
        let x = g.add(x, h);
        let h = self.ln_ffn.forward(g, store, x);
        let h = self.ffn.forward(g, store, h);
        let h = mode.dropout(g, h);
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize, ffn: usize) -> Self {
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), d, heads),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), d, heads),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, ffn),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        memory: Var,
        causal: &Mat,
        cross: &Mat,
        mode: &mut Mode,
    ) -> Var {
        let h = self.ln_self.forward(g, store, x);
        let h = self.self_attn.forward(g, store, h, h, causal);
        let h = mode.dropout(g, h);
        let x = g.add(x, h);
        let h = self.ln_cross.forward(g, store, x);
        let h = self.cross_attn.forward(g, store, h, memory, cross);
        let h = mode.dropout(g, h);
        let x = g.add(x, h);
        let h = self.ln_ffn.forward(g, store, x);
        let h = self.ffn.forward(g, store, h);
        let h = mode.dropout(g, h);
        g.add(x, h)
    }
}

/// Sinusoidal position table, `positions × d`.
pub fn sinusoidal_table(positions: usize, d: usize) -> Mat {
    Mat::from_shape_fn((positions, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Block-diagonal mask for sequences packed back to back.
pub fn block_mask(lengths: &[usize]) -> Mat {
    let n: usize = lengths.iter().sum();
    let mut mask = Mat::from_elem((n, n), MASKED);
    let mut start = 0;
    for &len in lengths {
        mask.slice_mut(ndarray::s![start..start + len, start..start + len]).fill(0.0);
        start += len;
    }
    mask
}

/// Lower-triangular causal mask.
pub fn causal_mask(n: usize) -> Mat {
    Mat::from_shape_fn((n, n), |(i, j)| if j > i { MASKED } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks() {
        let m = block_mask(&[1, 2]);
        assert_eq!(m[[0, 0]], 0.0);
        assert_eq!(m[[0, 1]], MASKED);
        assert_eq!(m[[2, 1]], 0.0);
        let c = causal_mask(3);
        assert_eq!(c[[0, 1]], MASKED);
        assert_eq!(c[[2, 0]], 0.0);
    }

    #[test]
    fn sinusoid_first_row() {
        let t = sinusoidal_table(2, 4);
        assert_eq!(t.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        assert!((t[[1, 0]] - 1f64.sin()).abs() < 1e-15);
    }
}
