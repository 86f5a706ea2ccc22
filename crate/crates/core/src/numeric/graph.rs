//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! Every value in a graph is a matrix (`rows x cols`); vectors are `1 x n`
//! and scalars `1 x 1`. Nodes are appended in evaluation order, so a node's
//! inputs always have smaller indices and the backward sweep is a reverse
//! scan.

use indexmap::IndexMap;

use super::params::ParameterStore;
use super::tensor::{matmul_acc, softmax_in_place, Tensor, PROB_FLOOR};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Transpose(Var),
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Row {
        x: Var,
        index: usize,
    },
    StackRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Nll {
        probs: Var,
        label: usize,
        active: bool,
    },
    Mean(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn as_matrix(t: Tensor) -> Result<Tensor> {
        if t.is_matrix() {
            Ok(t)
        } else {
            let (r, c) = (t.rows(), t.cols());
            t.reshape(vec![r, c])
        }
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        let value = Self::as_matrix(value)?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Binds a named parameter from `store`. Repeated calls with the same
    /// name return the same node, so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let value = Self::as_matrix(entry.tensor.clone())?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: !entry.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("add {:?} + {:?}", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(shape_err!("add_row {:?} + {:?}", tx.shape(), tr.shape()));
        }
        let n = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tr.data()[i % n])
            .collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("mul {:?} * {:?}", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies every row of `x` element-wise by a `1 x n` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(shape_err!("mul_row {:?} * {:?}", tx.shape(), tr.shape()));
        }
        let n = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * tr.data()[i % n])
            .collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(value, Op::MulRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(value, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Row-wise softmax. With `keep`, columns whose flag is `false` get
    /// probability exactly 0 and the remaining columns renormalize.
    pub fn softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        if let Some(keep) = keep {
            if keep.len() != cols {
                return Err(shape_err!(
                    "mask of length {} for {cols} columns",
                    keep.len()
                ));
            }
            if !keep.iter().any(|&k| k) {
                return Err(shape_err!("mask hides every column"));
            }
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            match keep {
                None => softmax_in_place(row),
                Some(keep) => masked_softmax_in_place(row, keep),
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if len == 0 || start + len > cols {
            return Err(shape_err!(
                "slice {start}..{} of {cols} columns",
                start + len
            ));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let value = Tensor::from_parts(vec![rows, len], data);
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if index >= rows {
            return Err(shape_err!("row {index} of {rows}"));
        }
        let value = Tensor::from_parts(vec![1, cols], self.value(x).row(index).to_vec());
        Ok(self.push(value, Op::Row { x, index }, &[x]))
    }

    /// Stacks `1 x n` rows into an `len x n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| shape_err!("stack of zero rows"))?;
        let cols = self.dims(*first).1;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let t = self.value(r);
            if t.rows() != 1 || t.cols() != cols {
                return Err(shape_err!(
                    "stack_rows expects 1 x {cols}, got {:?}",
                    t.shape()
                ));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_parts(vec![rows.len(), cols], data);
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rows))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero parts"))?;
        let rows = self.dims(*first).0;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(shape_err!("concat_cols with differing row counts"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_parts(vec![rows, total], data);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Column-wise maximum over the first `rows` rows (all rows when
    /// `None`). Ties resolve to the lowest row index.
    pub fn max_rows(&mut self, x: Var, rows: Option<usize>) -> Result<Var> {
        let (total, cols) = self.dims(x);
        let rows = rows.unwrap_or(total);
        if rows == 0 || rows > total {
            return Err(shape_err!("max over {rows} of {total} rows"));
        }
        let tx = self.value(x);
        let mut argmax = vec![0usize; cols];
        let mut best = tx.row(0).to_vec();
        for r in 1..rows {
            for (c, &v) in tx.row(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let value = Tensor::from_parts(vec![1, cols], best);
        Ok(self.push(value, Op::MaxRows { x, argmax }, &[x]))
    }

    /// Per-row standardization to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(value, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// `-ln(max(p[label], 1e-12))` for a `1 x 2` probability row.
    pub fn nll(&mut self, probs: Var, label: usize) -> Result<Var> {
        if label > 1 {
            return Err(Error::InvalidLabel(label));
        }
        let tp = self.value(probs);
        if tp.rows() != 1 || tp.cols() != 2 {
            return Err(shape_err!(
                "nll expects 1 x 2 probabilities, got {:?}",
                tp.shape()
            ));
        }
        let p = tp.data()[label];
        let active = p > PROB_FLOOR;
        let value = Tensor::scalar(-p.clamp(PROB_FLOOR, 1.0).ln());
        Ok(self.push(
            value,
            Op::Nll {
                probs,
                label,
                active,
            },
            &[probs],
        ))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err!("mean of zero terms"));
        }
        let mut sum = 0.0;
        for &x in xs {
            let t = self.value(x);
            if t.len() != 1 {
                return Err(shape_err!("mean expects scalars, got {:?}", t.shape()));
            }
            sum += t.data()[0];
        }
        let value = Tensor::scalar(sum / xs.len() as f64);
        Ok(self.push(value, Op::Mean(xs.to_vec()), xs))
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// node that needs one (parameters that are not frozen and everything
    /// downstream of them); other entries are `None`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "loss must be a scalar, got {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(d) = grads[i].take() else { continue };
            self.propagate(node, &d, &mut grads);
            if i == loss.0 {
                grads[i] = Some(d);
            } else {
                // intermediate gradients are not part of the result
                grads[i] = None;
            }
        }
        Ok(grads)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, d: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let brow = tb.row(p);
                            let drow = &d[i * n..(i + 1) * n];
                            ga[i * k + p] += drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = A^T * dC
                    let at = ta.transpose().expect("matrix");
                    matmul_acc(at.data(), d, gb, k, m, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.slot(grads, *v) {
                        add_into(g, d);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(g) = self.slot(grads, *x) {
                    add_into(g, d);
                }
                if let Some(g) = self.slot(grads, *row) {
                    let n = g.len();
                    for (i, dv) in d.iter().enumerate() {
                        g[i % n] += dv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(g) = self.slot(grads, *a) {
                    for ((gv, dv), bv) in g.iter_mut().zip(d).zip(tb.data()) {
                        *gv += dv * bv;
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    for ((gv, dv), av) in g.iter_mut().zip(d).zip(ta.data()) {
                        *gv += dv * av;
                    }
                }
            }
            Op::MulRow(x, row) => {
                let (tx, tr) = (self.value(*x), self.value(*row));
                let n = tr.cols();
                if let Some(g) = self.slot(grads, *x) {
                    for (i, (gv, dv)) in g.iter_mut().zip(d).enumerate() {
                        *gv += dv * tr.data()[i % n];
                    }
                }
                if let Some(g) = self.slot(grads, *row) {
                    for (i, (dv, xv)) in d.iter().zip(tx.data()).enumerate() {
                        g[i % n] += dv * xv;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(g) = self.slot(grads, *x) {
                    for (gv, dv) in g.iter_mut().zip(d) {
                        *gv += dv * factor;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    for ((gv, dv), yv) in g.iter_mut().zip(d).zip(y.data()) {
                        *gv += dv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    for ((gv, dv), yv) in g.iter_mut().zip(d).zip(y.data()) {
                        *gv += dv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                if let Some(g) = self.slot(grads, *x) {
                    for ((gv, dv), xv) in g.iter_mut().zip(d).zip(tx.data()) {
                        if *xv > 0.0 {
                            *gv += dv;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    let (r, c) = (y.rows(), y.cols());
                    // y is r x c, x is c x r
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] += d[i * c + j];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    let c = y.cols();
                    for ((grow, drow), yrow) in
                        g.chunks_mut(c).zip(d.chunks(c)).zip(y.data().chunks(c))
                    {
                        let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((gv, dv), yv) in grow.iter_mut().zip(drow).zip(yrow) {
                            *gv += yv * (dv - dot);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let len = y.cols();
                if let Some(g) = self.slot(grads, *x) {
                    for r in 0..y.rows() {
                        for j in 0..len {
                            g[r * cols + start + j] += d[r * len + j];
                        }
                    }
                }
            }
            Op::Row { x, index } => {
                let cols = y.cols();
                if let Some(g) = self.slot(grads, *x) {
                    add_into(&mut g[index * cols..(index + 1) * cols], d);
                }
            }
            Op::StackRows(rows) => {
                let cols = y.cols();
                for (r, v) in rows.iter().enumerate() {
                    if let Some(g) = self.slot(grads, *v) {
                        add_into(g, &d[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for v in parts {
                    let w = self.value(*v).cols();
                    if let Some(g) = self.slot(grads, *v) {
                        for r in 0..y.rows() {
                            add_into(
                                &mut g[r * w..(r + 1) * w],
                                &d[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::MaxRows { x, argmax } => {
                let cols = y.cols();
                if let Some(g) = self.slot(grads, *x) {
                    for (c, &r) in argmax.iter().enumerate() {
                        g[r * cols + c] += d[c];
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let c = y.cols();
                if let Some(g) = self.slot(grads, *x) {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let yrow = y.row(r);
                        let drow = &d[r * c..(r + 1) * c];
                        let mean_d = drow.iter().sum::<f64>() / c as f64;
                        let mean_dy =
                            drow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            g[r * c + j] += inv * (drow[j] - mean_d - yrow[j] * mean_dy);
                        }
                    }
                }
            }
            Op::Nll {
                probs,
                label,
                active,
            } => {
                if *active {
                    let p = self.value(*probs).data()[*label];
                    if let Some(g) = self.slot(grads, *probs) {
                        g[*label] -= d[0] / p;
                    }
                }
            }
            Op::Mean(xs) => {
                let share = d[0] / xs.len() as f64;
                for v in xs {
                    if let Some(g) = self.slot(grads, *v) {
                        g[0] += share;
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn masked_softmax_in_place(row: &mut [f64], keep: &[bool]) {
    let max = row
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (v, &k) in row.iter_mut().zip(keep) {
        *v = if k { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
