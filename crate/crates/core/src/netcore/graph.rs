//! Reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] is a tape built fresh for every forward pass. Rows index
//! sequence positions and columns index features. Parameters are borrowed
//! from their [`ParamStore`] rather than copied.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamKey, ParamStore};

pub type Mat = Array2<f64>;

/// Additive mask value; `exp` of it underflows to exactly zero.
pub const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Mat),
    Borrowed(&'a Mat),
}

impl Value<'_> {
    fn get(&self) -> &Mat {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Gelu { x: Var, tanh: Mat },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Transpose(Var),
    Dropout {
        x: Var,
        mask: Mat,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
    },
    KlDiv {
        student: Var,
        teacher: Var,
        tau: f64,
        detach_teacher: bool,
        teacher_probs: Mat,
        student_probs: Mat,
        per_row_kl: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamKey, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner_tanh(x: f64) -> f64 {
    (GELU_C * (x + 0.044715 * x * x * x)).tanh()
}

/// Derivative given the cached `tanh` of the inner term.
fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.nodes[v.0].value.get()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant or differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A parameter leaf. Repeated calls for the same key return the same node.
    pub fn param(&mut self, store: &'a ParamStore, index: usize) -> Var {
        let key = store.key(index);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(store.value(index)),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`; weights are stored as (out × in), so this is the linear map.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    /// Adds a constant (no gradient flows into it).
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddConst(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let tanh = self.value(a).mapv(gelu_inner_tanh);
        let mut out = self.value(a).clone();
        Zip::from(&mut out).and(&tanh).for_each(|x, &t| *x = 0.5 * *x * (1.0 + t));
        self.push(out, Op::Gelu { x: a, tanh })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Gathers rows of an embedding table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + width]).to_owned();
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let out = self.value(x).select(Axis(0), rows);
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).t().to_owned();
        self.push(out, Op::Transpose(x))
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: Var, mask: Mat) -> Var {
        let out = self.value(x) * &mask;
        self.push(out, Op::Dropout { x, mask })
    }

    /// Column-wise max over the rows listed in `rows` (1 × n result). Ties go
    /// to the earliest listed row.
    pub fn max_pool_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let n = xv.ncols();
        let mut out = Mat::zeros((1, n));
        let mut argmax = vec![0; n];
        for j in 0..n {
            let mut best = rows[0];
            for &r in &rows[1..] {
                if xv[[r, j]] > xv[[best, j]] {
                    best = r;
                }
            }
            argmax[j] = best;
            out[[0, j]] = xv[[best, j]];
        }
        self.push(out, Op::MaxPoolRows { x, argmax })
    }

    /// Summed negative log-likelihood of `targets` under a row-wise softmax of
    /// `logits`; rows with `None` targets are skipped. Result is 1×1.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        let mut probs = Mat::zeros(lv.dim());
        let mut loss = 0.0;
        for (i, row) in lv.rows().into_iter().enumerate() {
            let ls = log_softmax_row(row.as_slice().expect("standard layout"));
            if let Some(t) = targets[i] {
                loss -= ls[t];
            }
            for (j, l) in ls.iter().enumerate() {
                probs[[i, j]] = l.exp();
            }
        }
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Σ_rows KL(softmax(teacher/τ) ‖ softmax(student/τ)). 1×1 result.
    pub fn kl_div(&mut self, student: Var, teacher: Var, tau: f64, detach_teacher: bool) -> Var {
        let sv = self.value(student);
        let tv = self.value(teacher);
        let mut teacher_probs = Mat::zeros(tv.dim());
        let mut student_probs = Mat::zeros(sv.dim());
        let mut per_row_kl = Vec::with_capacity(sv.nrows());
        for i in 0..sv.nrows() {
            let s_row: Vec<f64> = sv.row(i).iter().map(|x| x / tau).collect();
            let t_row: Vec<f64> = tv.row(i).iter().map(|x| x / tau).collect();
            let ls = log_softmax_row(&s_row);
            let lt = log_softmax_row(&t_row);
            let mut kl = 0.0;
            for k in 0..ls.len() {
                let q = lt[k].exp();
                teacher_probs[[i, k]] = q;
                student_probs[[i, k]] = ls[k].exp();
                kl += q * (lt[k] - ls[k]);
            }
            per_row_kl.push(kl);
        }
        let total: f64 = per_row_kl.iter().sum();
        self.push(
            Mat::from_elem((1, 1), total),
            Op::KlDiv {
                student,
                teacher,
                tau,
                detach_teacher,
                teacher_probs,
                student_probs,
                per_row_kl,
            },
        )
    }

    /// Σ wᵢ·xᵢ over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut out = Mat::zeros(self.value(terms[0].0).dim());
        for &(v, w) in terms {
            out.scaled_add(w, self.value(v));
        }
        self.push(out, Op::WeightedSum(terms.to_vec()))
    }

    /// Backpropagates from a 1×1 node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones(self.value(root).dim()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(k, v)| grads[v.0].take().map(|g| (*k, g)))
            .collect();
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |grads: &mut [Option<Mat>], v: Var, m: Mat| match &mut grads[v.0] {
            Some(existing) => *existing += &m,
            slot @ None => *slot = Some(m),
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.dot(&self.value(*b).t()));
                acc(grads, *b, self.value(*a).t().dot(g));
            }
            Op::MatMulBt(a, b) => {
                acc(grads, *a, g.dot(self.value(*b)));
                acc(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, f) => acc(grads, *a, g * *f),
            Op::AddConst(a) => acc(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let y = self.nodes[idx].value.get();
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(grads, *a, d);
            }
            Op::Gelu { x, tanh } => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*x))
                    .and(tanh)
                    .for_each(|d, &x, &t| *d *= gelu_grad(x, t));
                acc(grads, *x, d);
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[idx].value.get();
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * dot);
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                acc(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * self.value(*gain);
                let d = xhat.ncols() as f64;
                let mut dx = Mat::zeros(xhat.dim());
                for i in 0..xhat.nrows() {
                    let dh = dxhat.row(i);
                    let xh = xhat.row(i);
                    let sum_dh = dh.sum();
                    let sum_dh_xh = dh.dot(&xh);
                    for j in 0..xhat.ncols() {
                        dx[[i, j]] =
                            inv_std[i] / d * (d * dh[j] - sum_dh - xh[j] * sum_dh_xh);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Embed { table, ids } => {
                let mut d = Mat::zeros(self.value(*table).dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id);
                    row += &g.row(i);
                }
                acc(grads, *table, d);
            }
            Op::SliceCols { x, start } => {
                let mut d = Mat::zeros(self.value(*x).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    acc(grads, p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SelectRows { x, rows } => {
                let mut d = Mat::zeros(self.value(*x).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut row = d.row_mut(r);
                    row += &g.row(i);
                }
                acc(grads, *x, d);
            }
            Op::Transpose(x) => acc(grads, *x, g.t().to_owned()),
            Op::Dropout { x, mask } => acc(grads, *x, g * mask),
            Op::MaxPoolRows { x, argmax } => {
                let mut d = Mat::zeros(self.value(*x).dim());
                for (j, &r) in argmax.iter().enumerate() {
                    d[[r, j]] += g[[0, j]];
                }
                acc(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g[[0, 0]];
                let mut d = Mat::zeros(probs.dim());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..probs.ncols() {
                            d[[i, j]] = scale * probs[[i, j]];
                        }
                        d[[i, *t]] -= scale;
                    }
                }
                acc(grads, *logits, d);
            }
            Op::KlDiv {
                student,
                teacher,
                tau,
                detach_teacher,
                teacher_probs,
                student_probs,
                per_row_kl,
            } => {
                let scale = g[[0, 0]] / tau;
                acc(grads, *student, (student_probs - teacher_probs) * scale);
                if !detach_teacher {
                    let mut d = Mat::zeros(teacher_probs.dim());
                    for i in 0..d.nrows() {
                        for k in 0..d.ncols() {
                            let q = teacher_probs[[i, k]];
                            if q == 0.0 {
                                continue;
                            }
                            let log_ratio = q.ln() - student_probs[[i, k]].ln();
                            d[[i, k]] = scale * q * (log_ratio - per_row_kl[i]);
                        }
                    }
                    acc(grads, *teacher, d);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(grads, v, g * w);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: HashMap<ParamKey, Mat>,
}

impl Gradients {
    /// Gradient with respect to a non-parameter node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, key: ParamKey) -> Option<&Mat> {
        self.params.get(&key)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamKey, &Mat)> {
        self.params.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    // Central differences on a scalar function of one input matrix.
    fn numeric(f: &dyn Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let h = 1e-5;
        let mut out = Mat::zeros(x.dim());
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            out[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn check(build: &dyn Fn(&mut Graph, Var) -> Var, x: Mat) {
        let f = |x: &Mat| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        let analytic = g.backward(out).wrt(v).cloned().unwrap();
        let num = numeric(&f, &x);
        for (a, n) in analytic.iter().zip(num.iter()) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.5], [1.1, 0.4, -0.7]]
    }

    #[test]
    fn layer_norm_gradient() {
        check(
            &|g, x| {
                let gain = g.input(array![[1.5, -0.5, 0.8]]);
                let bias = g.input(array![[0.1, 0.2, 0.3]]);
                let y = g.layer_norm(x, gain, bias, 1e-5);
                let w = g.input(array![[0.2, -1.0, 0.7], [0.5, 0.5, -0.3]]);
                let z = g.matmul_bt(y, w);
                g.cross_entropy(z, &[Some(0), Some(1)])
            },
            sample(),
        );
    }

    #[test]
    fn softmax_gelu_tanh_gradient() {
        check(
            &|g, x| {
                let a = g.gelu(x);
                let b = g.tanh(a);
                let c = g.softmax_rows(b);
                let w = g.input(array![[1.0], [2.0], [-3.0]]);
                let d = g.matmul(c, w);
                let t = g.transpose(d);
                g.cross_entropy(t, &[Some(1)])
            },
            sample(),
        );
    }

    #[test]
    fn slicing_and_selection_gradient() {
        check(
            &|g, x| {
                let a = g.slice_cols(x, 1, 2);
                let b = g.slice_cols(x, 0, 1);
                let c = g.concat_cols(&[a, b]);
                let r = g.select_rows(c, &[1, 0, 1]);
                let m = g.max_pool_rows(r, &[0, 1, 2]);
                g.cross_entropy(m, &[Some(2)])
            },
            sample(),
        );
    }

    #[test]
    fn kl_gradient_both_sides() {
        let teacher = array![[0.2, -0.4, 1.0], [0.0, 0.3, 0.1]];
        check(
            &|g, x| {
                let t = g.input(teacher.clone());
                g.kl_div(x, t, 1.7, false)
            },
            sample(),
        );
        check(
            &|g, x| {
                let s = g.input(teacher.clone());
                g.kl_div(s, x, 0.6, false)
            },
            sample(),
        );
    }

    #[test]
    fn detached_teacher_gets_no_gradient() {
        let mut g = Graph::new();
        let s = g.input(sample());
        let t = g.input(array![[0.0, 1.0, 2.0], [2.0, 1.0, 0.0]]);
        let kl = g.kl_div(s, t, 1.0, true);
        let grads = g.backward(kl);
        assert!(grads.wrt(s).is_some());
        assert!(grads.wrt(t).is_none());
    }

    #[test]
    fn max_pool_ties_route_to_earliest_row() {
        let mut g = Graph::new();
        let x = g.input(array![[1.0, 0.0], [1.0, 2.0], [0.5, 2.0]]);
        let m = g.max_pool_rows(x, &[0, 1, 2]);
        let w = g.weighted_sum(&[(m, 1.0)]);
        let s = g.transpose(w);
        let one = g.input(array![[1.0, 1.0]]);
        let total = g.matmul(one, s);
        let grads = g.backward(total);
        assert_eq!(grads.wrt(x).unwrap(), array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
    }
}
