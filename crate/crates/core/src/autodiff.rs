//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every value on the tape is a 2-D `f64` array. Batched code keeps one
//! sample per row; sequences are stored interleaved (`row = b * len + s`).
//! Binary elementwise ops broadcast a `1 × c`, `r × 1` or `1 × 1` operand
//! against the other side, and the backward pass sums the gradient back
//! over the broadcast axes.

use ndarray::{s, Array2, Axis, Zip};

use crate::nn::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    ReluSq(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RmsNorm(Var, f64),
    L2Normalize(Var),
    SumRows(Var),
    Sum(Var),
    RevCumsumCols(Var),
    ConcatCols(Vec<Var>),
    Interleave(Vec<Var>),
    SelectStep { src: Var, step: usize, len: usize },
    CausalAttention { q: Var, k: Var, v: Var, len: usize, probs: Vec<Array2<f64>> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a forward computation so it can be differentiated afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    grads: Vec<Option<Array2<f64>>>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast {a:?} vs {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sum `g` down to `shape`, undoing a broadcast.
fn unbroadcast(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn binary_map(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let av = a.broadcast(shape).expect("broadcast lhs");
    let bv = b.broadcast(shape).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    /// A constant (or an input we may still want a gradient for).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let idx = id.index();
        if self.params.len() <= idx {
            self.params.resize(idx + 1, None);
        }
        if let Some(v) = self.params[idx] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params[idx] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = binary_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = binary_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = binary_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let k = self.constant(Array2::from_elem((1, 1), c));
        self.add(a, k)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Log(a))
    }

    /// `max(0, x)`.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// `max(0, x)^2`.
    pub fn relu_sq(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let r = x.max(0.0);
            r * r
        });
        self.push(value, Op::ReluSq(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmax(a))
    }

    /// Parameter-free RMSNorm per row: `x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
        }
        self.push(value, Op::RmsNorm(a, eps))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / n);
        }
        self.push(value, Op::L2Normalize(a))
    }

    /// `r × c → r × 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumRows(a))
    }

    /// `r × c → 1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Per row, `out[t] = sum_{k >= t} in[k]`.
    pub fn rev_cumsum_cols(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let mut acc = 0.0;
            for v in row.iter_mut().rev() {
                acc += *v;
                *v = acc;
            }
        }
        self.push(value, Op::RevCumsumCols(a))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols shapes");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks `len` matrices of shape `B × d` into `(B * len) × d` with row
    /// `b * len + s` taken from `steps[s]`.
    pub fn interleave(&mut self, steps: &[Var]) -> Var {
        let len = steps.len();
        let (rows, cols) = self.value(steps[0]).dim();
        let mut value = Array2::zeros((rows * len, cols));
        for (s, &v) in steps.iter().enumerate() {
            let src = self.value(v);
            assert_eq!(src.dim(), (rows, cols), "interleave shapes");
            value.slice_mut(s![s..;len, ..]).assign(src);
        }
        self.push(value, Op::Interleave(steps.to_vec()))
    }

    /// Inverse of [`Tape::interleave`] for a single step.
    pub fn select_step(&mut self, src: Var, step: usize, len: usize) -> Var {
        let value = self.value(src).slice(s![step..;len, ..]).to_owned();
        self.push(value, Op::SelectStep { src, step, len })
    }

    /// Single-head causal self-attention over interleaved sequences of
    /// length `len`. Position `s` attends to positions `0..=s` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, len: usize) -> Var {
        let (rows, dim) = self.value(q).dim();
        assert_eq!(rows % len, 0);
        let scale = 1.0 / (dim as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((rows, dim));
        let mut probs = Vec::with_capacity(rows / len);
        for b in 0..rows / len {
            let r = b * len..(b + 1) * len;
            let qb = qv.slice(s![r.clone(), ..]);
            let kb = kv.slice(s![r.clone(), ..]);
            let vb = vv.slice(s![r.clone(), ..]);
            let mut p = Array2::zeros((len, len));
            for i in 0..len {
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let sc = qb.row(i).dot(&kb.row(j)) * scale;
                    p[[i, j]] = sc;
                    max = max.max(sc);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    let e = (p[[i, j]] - max).exp();
                    p[[i, j]] = e;
                    sum += e;
                }
                for j in 0..=i {
                    p[[i, j]] /= sum;
                }
            }
            out.slice_mut(s![r, ..]).assign(&p.dot(&vb));
            probs.push(p);
        }
        self.push(out, Op::CausalAttention { q, k, v, len, probs })
    }

    fn accumulate(&mut self, v: Var, g: Array2<f64>) {
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagates from a `1 × 1` node. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &op, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
    }

    fn backprop_node(&mut self, i: usize, op: &Op, g: &Array2<f64>) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Add(a, b) => {
                let (sa, sb) = (self.value(*a).dim(), self.value(*b).dim());
                self.accumulate(*a, unbroadcast(g.clone(), sa));
                self.accumulate(*b, unbroadcast(g.clone(), sb));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.value(*a).dim(), self.value(*b).dim());
                self.accumulate(*a, unbroadcast(g.clone(), sa));
                self.accumulate(*b, unbroadcast(-g, sb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = unbroadcast(binary_map(g, bv, |x, y| x * y), av.dim());
                let gb = unbroadcast(binary_map(g, av, |x, y| x * y), bv.dim());
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Scale(a, c) => self.accumulate(*a, g * *c),
            Op::Exp(a) => {
                let ga = g * &self.nodes[i].value;
                self.accumulate(*a, ga);
            }
            Op::Log(a) => {
                let ga = g / self.value(*a);
                self.accumulate(*a, ga);
            }
            Op::Relu(a) => {
                let ga = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(*a, ga);
            }
            Op::ReluSq(a) => {
                let ga = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| if x > 0.0 { 2.0 * x * g } else { 0.0 });
                self.accumulate(*a, ga);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let mut ga = g * y;
                let dots = ga.sum_axis(Axis(1));
                for (mut row, (yr, d)) in ga.rows_mut().into_iter().zip(y.rows().into_iter().zip(dots.iter())) {
                    row.zip_mut_with(&yr, |v, &p| *v -= p * d);
                }
                self.accumulate(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[i].value;
                let sums = g.sum_axis(Axis(1));
                let mut ga = g.clone();
                for (mut row, (yr, s)) in ga.rows_mut().into_iter().zip(y.rows().into_iter().zip(sums.iter())) {
                    row.zip_mut_with(&yr, |v, &ly| *v -= ly.exp() * s);
                }
                self.accumulate(*a, ga);
            }
            Op::RmsNorm(a, eps) => {
                let x = self.value(*a);
                let n = x.ncols() as f64;
                let mut ga = Array2::zeros(x.dim());
                for ((mut out, xr), gr) in ga.rows_mut().into_iter().zip(x.rows()).zip(g.rows()) {
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / n;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let gx = gr.dot(&xr);
                    let coef = inv * inv * inv * gx / n;
                    Zip::from(&mut out).and(&gr).and(&xr).for_each(|o, &gv, &xv| *o = gv * inv - coef * xv);
                }
                self.accumulate(*a, ga);
            }
            Op::L2Normalize(a) => {
                let x = self.value(*a);
                let mut ga = Array2::zeros(x.dim());
                for ((mut out, xr), gr) in ga.rows_mut().into_iter().zip(x.rows()).zip(g.rows()) {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gx = gr.dot(&xr);
                    let coef = gx / (n * n * n);
                    Zip::from(&mut out).and(&gr).and(&xr).for_each(|o, &gv, &xv| *o = gv / n - coef * xv);
                }
                self.accumulate(*a, ga);
            }
            Op::SumRows(a) => {
                let shape = self.value(*a).dim();
                let ga = g.broadcast(shape).expect("sum_rows grad").to_owned();
                self.accumulate(*a, ga);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).dim();
                self.accumulate(*a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::RevCumsumCols(a) => {
                let mut ga = g.clone();
                for mut row in ga.rows_mut() {
                    let mut acc = 0.0;
                    for v in row.iter_mut() {
                        acc += *v;
                        *v = acc;
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    let gp = g.slice(s![.., start..start + w]).to_owned();
                    self.accumulate(p, gp);
                    start += w;
                }
            }
            Op::Interleave(steps) => {
                let len = steps.len();
                for (s, &v) in steps.iter().enumerate() {
                    let gp = g.slice(s![s..;len, ..]).to_owned();
                    self.accumulate(v, gp);
                }
            }
            Op::SelectStep { src, step, len } => {
                let mut ga = Array2::zeros(self.value(*src).dim());
                ga.slice_mut(s![*step..;*len, ..]).assign(g);
                self.accumulate(*src, ga);
            }
            Op::CausalAttention { q, k, v, len, probs } => {
                let (rows, dim) = self.value(*q).dim();
                let scale = 1.0 / (dim as f64).sqrt();
                let mut gq = Array2::zeros((rows, dim));
                let mut gk = Array2::zeros((rows, dim));
                let mut gv = Array2::zeros((rows, dim));
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                for (b, p) in probs.iter().enumerate() {
                    let r = b * len..(b + 1) * len;
                    let gb = g.slice(s![r.clone(), ..]);
                    let vb = vv.slice(s![r.clone(), ..]);
                    gv.slice_mut(s![r.clone(), ..]).assign(&p.t().dot(&gb));
                    let gp = gb.dot(&vb.t());
                    let mut gs = Array2::zeros((*len, *len));
                    for i in 0..*len {
                        let mut dot = 0.0;
                        for j in 0..=i {
                            dot += gp[[i, j]] * p[[i, j]];
                        }
                        for j in 0..=i {
                            gs[[i, j]] = p[[i, j]] * (gp[[i, j]] - dot) * scale;
                        }
                    }
                    gq.slice_mut(s![r.clone(), ..]).assign(&gs.dot(&kv.slice(s![r.clone(), ..])));
                    gk.slice_mut(s![r.clone(), ..]).assign(&gs.t().dot(&qv.slice(s![r, ..])));
                }
                self.accumulate(*q, gq);
                self.accumulate(*k, gk);
                self.accumulate(*v, gv);
            }
        }
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter in `store`, zero where the parameter
    /// was not touched by the forward pass.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Array2<f64>> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(id.index())
                    .copied()
                    .flatten()
                    .and_then(|v| self.grad(v).cloned())
                    .unwrap_or_else(|| Array2::zeros(store.value(id).dim()))
            })
            .collect()
    }
}
