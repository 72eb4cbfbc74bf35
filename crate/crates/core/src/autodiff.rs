//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter the
//! tape through [`Graph::param`], which reads from a borrowed
//! [`ParamStore`]; calling [`Graph::backward`] on a scalar node returns the
//! gradient of that scalar with respect to every parameter touched.
//!
//! All arithmetic is `f64`, which keeps central finite-difference checks
//! meaningful down to relative errors of about 1e-8.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{softmax_in_place, Tensor};

/// Clamp applied before every logarithm taken on the tape.
pub const LOG_CLAMP: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Pick(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Extremum(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// A constant input; gradients do not flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A parameter leaf. Repeated calls with the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape mismatch");
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (v, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a (r×c) ∘ row (1×c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row shape mismatch");
        let mut value = self.value(a).clone();
        let w = self.value(row).data().to_vec();
        for i in 0..r {
            for (v, s) in value.row_mut(i).iter_mut().zip(&w) {
                *v *= s;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// `a (r×c) ∘ col (r×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col shape mismatch");
        let mut value = self.value(a).clone();
        let w = self.value(col).data().to_vec();
        for (i, s) in w.iter().enumerate() {
            for v in value.row_mut(i) {
                *v *= s;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    /// `ln(max(x, LOG_CLAMP))`; the gradient is zero where the clamp is active.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(LOG_CLAMP).ln());
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row {
                *x -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let c = value.cols() as f64;
        let mut inv_std = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNormRows(a, inv_std), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&tensors);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.cols(), "column slice out of range");
        let rows: Vec<&[f64]> = (0..src.rows())
            .map(|r| &src.row(r)[start..start + len])
            .collect();
        let value = if rows.is_empty() {
            Tensor::zeros(0, len)
        } else {
            Tensor::from_rows(&rows)
        };
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `r×c → 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = vec![0.0; src.cols()];
        for r in 0..src.rows() {
            for (o, v) in out.iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::row_vector(out), Op::SumRows(a), rg)
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let out = (0..src.rows()).map(|r| src.row(r).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::col_vector(out), Op::SumCols(a), rg)
    }

    /// Picks `a[i, idx[i]]` for every row, giving an `r×1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows(), idx.len(), "pick index count mismatch");
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| src.get(r, c))
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::col_vector(out), Op::Pick(a, idx.to_vec()), rg)
    }

    /// Row lookup (embedding gather): output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let src = self.value(table);
        let rows: Vec<&[f64]> = ids.iter().map(|&i| src.row(i)).collect();
        let value = if rows.is_empty() {
            Tensor::zeros(0, src.cols())
        } else {
            Tensor::from_rows(&rows)
        };
        let rg = self.rg(table);
        self.push(value, Op::GatherRows(table, ids.to_vec()), rg)
    }

    /// Largest entry (first on ties) as a 1×1 node; subgradient flows to that entry.
    pub fn max(&mut self, a: Var) -> Var {
        let src = self.value(a).data();
        let idx = crate::tensor::argmax(src);
        let value = Tensor::scalar(src[idx]);
        let rg = self.rg(a);
        self.push(value, Op::Extremum(a, idx), rg)
    }

    /// Smallest entry (first on ties) as a 1×1 node.
    pub fn min(&mut self, a: Var) -> Var {
        let src = self.value(a).data();
        let mut idx = 0;
        for (i, &v) in src.iter().enumerate() {
            if v < src[idx] {
                idx = i;
            }
        }
        let value = Tensor::scalar(src[idx]);
        let rg = self.rg(a);
        self.push(value, Op::Extremum(a, idx), rg)
    }

    /// Reverse sweep from the scalar `loss`; returns gradients per parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients::new(self.store.len());
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v.0).and_then(Option::as_ref) {
                out.accumulate(id, g);
            }
        }
        out
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul_t(val(*b)));
                }
                if self.rg(*b) {
                    send(*b, val(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |x, y| x * y));
                send(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                send(*row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let w = val(*row);
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    for (x, s) in ga.row_mut(r).iter_mut().zip(w.data()) {
                        *x *= s;
                    }
                }
                send(*a, ga);
                send(*row, column_sums(&g.zip_map(val(*a), |x, y| x * y)));
            }
            Op::MulCol(a, col) => {
                let w = val(*col);
                let mut ga = g.clone();
                for (r, s) in w.data().iter().enumerate() {
                    for x in ga.row_mut(r) {
                        *x *= s;
                    }
                }
                send(*a, ga);
                let prod = g.zip_map(val(*a), |x, y| x * y);
                let sums = (0..prod.rows()).map(|r| prod.row(r).iter().sum()).collect();
                send(*col, Tensor::col_vector(sums));
            }
            Op::Scale(a, k) => send(*a, g.map(|x| x * k)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Tanh(a) => send(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Sigmoid(a) => send(*a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Relu(a) => send(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Exp(a) => send(*a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => send(
                *a,
                g.zip_map(val(*a), |x, y| if y > LOG_CLAMP { x / y } else { 0.0 }),
            ),
            Op::SoftmaxRows(a) => {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let y = out.row(r);
                    let dot: f64 = g.row(r).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (x, &yi) in ga.row_mut(r).iter_mut().zip(y) {
                        *x = yi * (*x - dot);
                    }
                }
                send(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (x, &yi) in ga.row_mut(r).iter_mut().zip(out.row(r)) {
                        *x -= yi.exp() * total;
                    }
                }
                send(*a, ga);
            }
            Op::LayerNormRows(a, inv_std) => {
                let mut ga = g.clone();
                let c = out.cols() as f64;
                for r in 0..ga.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c;
                    for ((x, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gr).zip(y) {
                        *x = inv_std[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
                send(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.rg(p) {
                        let mut part = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            part.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        send(p, part);
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.rg(p) {
                        send(p, g.slice_rows(offset, rows));
                    }
                    offset += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                send(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                send(*a, ga);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                send(*a, Tensor::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).copy_from_slice(g.data());
                }
                send(*a, ga);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    ga.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                send(*a, ga);
            }
            Op::Pick(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for (i, &j) in idx.iter().enumerate() {
                    ga.set(i, j, g.data()[i]);
                }
                send(*a, ga);
            }
            Op::GatherRows(table, ids) => {
                let (r, c) = self.shape(*table);
                let mut ga = Tensor::zeros(r, c);
                for (i, &id) in ids.iter().enumerate() {
                    for (x, gi) in ga.row_mut(id).iter_mut().zip(g.row(i)) {
                        *x += gi;
                    }
                }
                send(*table, ga);
            }
            Op::Extremum(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                ga.data_mut()[*idx] = g.item();
                send(*a, ga);
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of a single row, exposed for callers that work outside a graph.
pub fn softmax_row(xs: &mut [f64]) {
    softmax_in_place(xs);
}
