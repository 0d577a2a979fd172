//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape lazily, once each, through [`Tape::param`]; [`Tape::backward`]
//! walks the tape in reverse and returns a gradient for every parameter of the
//! bound [`Parameters`], zero for parameters the loss never touched.

use crate::losses;
use crate::net::params::{ParamId, Parameters};
use crate::pl;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ReplaceRows {
        x: Var,
        token: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    MeanRows(Var),
    PlNll {
        scores: Var,
        order: Vec<usize>,
    },
    Pairwise(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
    },
    MaskedMse {
        pred: Var,
        target: Tensor,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients aligned with a [`Parameters`] instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

pub struct Tape<'p> {
    params: &'p Parameters,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Parameters) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p Parameters {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Bind a parameter; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param(id), &[]);
        self.bound[id.index()] = Some(v);
        v
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Add a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a single row");
        assert_eq!(b.cols(), self.value(a).cols(), "bias width");
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_exact_mut(cols) {
            for (x, bv) in row.iter_mut().zip(b.data()) {
                *x += bv;
            }
        }
        self.push(value, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Per-row layer normalization with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut value = xhat.clone();
        for row in value.data_mut().chunks_exact_mut(cols) {
            for ((o, gv), bv) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors);
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let value = self.value(a).gather_rows(index);
        self.push(value, Op::GatherRows(a, index.to_vec()), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let src = self.value(a);
        let mut value = Tensor::zeros(src.rows(), end - start);
        for r in 0..src.rows() {
            value.row_mut(r).copy_from_slice(&src.row(r)[start..end]);
        }
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols height");
                value.row_mut(r)[offset..offset + src.cols()].copy_from_slice(src.row(r));
                offset += src.cols();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Replace the rows flagged in `mask` by the single-row `token`.
    pub fn replace_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Var {
        let tok = self.value(token);
        let mut value = self.value(x).clone();
        assert_eq!(mask.len(), value.rows(), "mask length");
        assert_eq!(tok.shape(), (1, value.cols()), "mask token shape");
        for (r, &m) in mask.iter().enumerate() {
            if m {
                value.row_mut(r).copy_from_slice(tok.data());
            }
        }
        self.push(
            value,
            Op::ReplaceRows {
                x,
                token,
                mask: mask.to_vec(),
            },
            &[x, token],
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Tensor::zeros(1, src.cols());
        for row in src.iter_rows() {
            for (o, v) in value.data_mut().iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = src.rows() as f64;
        value.data_mut().iter_mut().for_each(|v| *v /= n);
        self.push(value, Op::MeanRows(a), &[a])
    }

    /// Weighted sum of scalar variables; returns a constant zero when empty.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.unwrap_or_else(|| self.constant(Tensor::scalar(0.0)))
    }

    /// Plackett-Luce negative log-likelihood of `order` under the scores in `scores`.
    pub fn pl_nll(&mut self, scores: Var, order: &[usize]) -> Var {
        let value = Tensor::scalar(pl::nll_unchecked(self.value(scores).data(), order));
        self.push(
            value,
            Op::PlNll {
                scores,
                order: order.to_vec(),
            },
            &[scores],
        )
    }

    pub fn pairwise(&mut self, scores: Var) -> Var {
        let value = Tensor::scalar(losses::pairwise_value(self.value(scores).data()));
        self.push(value, Op::Pairwise(scores), &[scores])
    }

    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let value = Tensor::scalar(losses::cross_entropy_value(self.value(logits).data(), target));
        self.push(value, Op::CrossEntropy { logits, target }, &[logits])
    }

    /// Mean squared error over the rows flagged in `mask`; `target` is held fixed.
    pub fn masked_mse(&mut self, pred: Var, target: Tensor, mask: &[bool]) -> Var {
        let value = Tensor::scalar(losses::masked_mse_value(self.value(pred), &target, mask));
        self.push(
            value,
            Op::MaskedMse {
                pred,
                target,
                mask: mask.to_vec(),
            },
            &[pred],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.grads[id.index()].add_assign(&g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_t(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t_matmul(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.t_matmul(self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, column_sums(&g));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.scale(*f)),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        *gv *= gelu_grad(xv);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let cols = xhat.cols();
                    let gam = self.value(*gamma);
                    if self.needs(*gamma) {
                        let mut gg = Tensor::zeros(1, cols);
                        for r in 0..xhat.rows() {
                            for ((o, gv), xh) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                                *o += gv * xh;
                            }
                        }
                        accumulate(&mut grads, *gamma, gg);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, column_sums(&g));
                    }
                    if self.needs(*x) {
                        let n = cols as f64;
                        let mut gx = Tensor::zeros(xhat.rows(), cols);
                        let mut dxhat = vec![0.0; cols];
                        for (r, &inv) in inv_std.iter().enumerate() {
                            for ((d, gv), gm) in dxhat.iter_mut().zip(g.row(r)).zip(gam.data()) {
                                *d = gv * gm;
                            }
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 = dxhat.iter().zip(xhat.row(r)).map(|(d, xh)| d * xh).sum();
                            for ((o, d), xh) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                                *o = inv / n * (n * d - sum_d - xh * sum_dx);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    let cols = y.cols();
                    for (grow, yrow) in ga.data_mut().chunks_exact_mut(cols).zip(y.data().chunks_exact(cols)) {
                        let inner: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.needs(p) {
                            accumulate(&mut grads, p, g.slice_rows(start, start + rows));
                        }
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, index) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for (r, &src) in index.iter().enumerate() {
                        for (o, gv) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    let w = g.cols();
                    for r in 0..rows {
                        ga.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        if self.needs(p) {
                            let mut gp = Tensor::zeros(rows, cols);
                            for r in 0..rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += cols;
                    }
                }
                Op::ReplaceRows { x, token, mask } => {
                    if self.needs(*token) {
                        let mut gt = Tensor::zeros(1, g.cols());
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                for (o, gv) in gt.data_mut().iter_mut().zip(g.row(r)) {
                                    *o += gv;
                                }
                            }
                        }
                        accumulate(&mut grads, *token, gt);
                    }
                    if self.needs(*x) {
                        let mut gx = g;
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                gx.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads, *a, Tensor::filled(rows, cols, g.item()));
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    let scale = 1.0 / rows as f64;
                    for r in 0..rows {
                        for (o, gv) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *o = gv * scale;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::PlNll { scores, order } => {
                    let s = self.value(*scores);
                    let dl = pl::nll_grad_unchecked(s.data(), order);
                    let ga = Tensor::from_vec(s.rows(), s.cols(), dl).unwrap().scale(g.item());
                    accumulate(&mut grads, *scores, ga);
                }
                Op::Pairwise(scores) => {
                    let s = self.value(*scores);
                    let dl = losses::pairwise_grad(s.data());
                    let ga = Tensor::from_vec(s.rows(), s.cols(), dl).unwrap().scale(g.item());
                    accumulate(&mut grads, *scores, ga);
                }
                Op::CrossEntropy { logits, target } => {
                    let z = self.value(*logits);
                    let mut p = z.data().to_vec();
                    softmax_in_place(&mut p);
                    p[*target] -= 1.0;
                    let ga = Tensor::from_vec(z.rows(), z.cols(), p).unwrap().scale(g.item());
                    accumulate(&mut grads, *logits, ga);
                }
                Op::MaskedMse { pred, target, mask } => {
                    let p = self.value(*pred);
                    let count = mask.iter().filter(|&&m| m).count() as f64 * p.cols() as f64;
                    let mut ga = Tensor::zeros(p.rows(), p.cols());
                    let scale = 2.0 * g.item() / count;
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for ((o, pv), tv) in ga.row_mut(r).iter_mut().zip(p.row(r)).zip(target.row(r)) {
                                *o = scale * (pv - tv);
                            }
                        }
                    }
                    accumulate(&mut grads, *pred, ga);
                }
            }
        }
        out
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for row in g.iter_rows() {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
