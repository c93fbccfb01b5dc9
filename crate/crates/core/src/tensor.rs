//! Dense f64 tensors with tape-based reverse-mode autodiff.
//!
//! Everything is 64-bit and row-major. Operations are recorded on a [`Tape`]
//! in execution order; [`Tape::backward`] replays them in reverse and
//! accumulates gradients into every leaf that requires them. The op set is
//! exactly what a small transformer plus a log-space mixture loss needs --
//! no broadcasting beyond row/column vectors, no higher-order derivatives.
//!
//! Shape or index misuse is a programmer error and panics. Non-finite
//! values after any op are a hard error in debug builds.

use std::panic::{catch_unwind, AssertUnwindSafe};

/// A dense row-major f64 tensor. 1-D (`[n]`) or 2-D (`[r, c]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} wants {} elements, got {}", shape, n, data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row/column count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// [m,k] x [k,n] -> [m,n]
    Matmul(Var, Var),
    /// elementwise, same shape
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// [n,m] + row vector [m]
    AddRow(Var, Var),
    /// [n,m] - per-row scalar [n]
    SubCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Transpose(Var),
    /// rows of `0` selected by index list
    GatherRows(Var, Vec<usize>),
    /// [n,m] -> [n,1], element (i, ids[i])
    SelectPerRow(Var, Vec<usize>),
    /// along `1`: 0 = columns (output [m]), 1 = rows (output [n])
    LogSumExp(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// columns [start, start+len) of a matrix
    SliceCols(Var, usize, usize),
    SumAll(Var),
    /// per-row normalization of `x`, scaled by gamma and shifted by beta
    LayerNorm(Var, Var, Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records ops in execution order; every node's inputs precede it, so the
/// reverse sweep visits each node exactly once.
pub struct Tape {
    nodes: Vec<Node>,
    completed: bool,
}

const LN_EPS: f64 = 1e-5;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), completed: false }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        assert!(!self.completed, "tape already consumed by backward");
        debug_assert!(value.all_finite(), "non-finite output of {:?}", op);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Register a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Register a non-differentiable input (data, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- ops -----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul inner dims: {}x{} by {}x{}", m, k, k2, n);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, out), rg, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        let rg = self.needs(a) || self.needs(b);
        self.push(out, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        let rg = self.needs(a) || self.needs(b);
        self.push(out, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        let rg = self.needs(a) || self.needs(b);
        self.push(out, rg, Op::Mul(a, b))
    }

    /// `a[i, j] + row[j]` for a matrix and a row vector.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let (n, m) = (ta.rows(), ta.cols());
        assert_eq!(tr.shape, vec![m], "add_row wants a [{}] vector", m);
        let mut data = ta.data.clone();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += tr.data[j];
            }
        }
        let rg = self.needs(a) || self.needs(row);
        self.push(Tensor::matrix(n, m, data), rg, Op::AddRow(a, row))
    }

    /// `a[i, j] - col[i]` for a matrix and a per-row scalar vector.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        let (n, m) = (ta.rows(), ta.cols());
        assert_eq!(tc.shape, vec![n], "sub_col wants a [{}] vector", n);
        let mut data = ta.data.clone();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] -= tc.data[i];
            }
        }
        let rg = self.needs(a) || self.needs(col);
        self.push(Tensor::matrix(n, m, data), rg, Op::SubCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|x| x * c).collect() };
        let rg = self.needs(a);
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|x| x.max(0.0)).collect() };
        let rg = self.needs(a);
        self.push(out, rg, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|x| x.exp()).collect() };
        let rg = self.needs(a);
        self.push(out, rg, Op::Exp(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (n, m) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = ta.data[i * m + j];
            }
        }
        let rg = self.needs(a);
        self.push(Tensor::matrix(m, n, data), rg, Op::Transpose(a))
    }

    /// Row lookup: output row i is `table` row `ids[i]`. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = &self.nodes[table.0].value;
        let (v, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "gather_rows id {} out of range {}", id, v);
            data.extend_from_slice(&tt.data[id * d..(id + 1) * d]);
        }
        let rg = self.needs(table);
        self.push(Tensor::matrix(ids.len(), d, data), rg, Op::GatherRows(table, ids.to_vec()))
    }

    /// Per-row element pick: output [n,1] with element (i, ids[i]) of `a`.
    pub fn select_per_row(&mut self, a: Var, ids: &[usize]) -> Var {
        let ta = &self.nodes[a.0].value;
        let (n, m) = (ta.rows(), ta.cols());
        assert_eq!(ids.len(), n, "select_per_row wants {} indices", n);
        let mut data = Vec::with_capacity(n);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < m, "select_per_row id {} out of range {}", id, m);
            data.push(ta.data[i * m + id]);
        }
        let rg = self.needs(a);
        self.push(Tensor::matrix(n, 1, data), rg, Op::SelectPerRow(a, ids.to_vec()))
    }

    /// Max-shifted log(sum(exp)) along `axis` of a matrix (or of a vector,
    /// axis 0). Never overflows for finite inputs.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        let rg = self.needs(a);
        let out = match ta.shape.len() {
            1 => {
                assert_eq!(axis, 0, "vector log_sum_exp wants axis 0");
                assert!(!ta.data.is_empty(), "log_sum_exp over empty axis");
                Tensor::scalar(lse_slice(&ta.data))
            }
            2 => {
                let (n, m) = (ta.rows(), ta.cols());
                match axis {
                    1 => {
                        assert!(m > 0, "log_sum_exp over empty axis");
                        let data = (0..n).map(|i| lse_slice(ta.row(i))).collect();
                        Tensor::vector(data)
                    }
                    0 => {
                        assert!(n > 0, "log_sum_exp over empty axis");
                        let mut data = Vec::with_capacity(m);
                        for j in 0..m {
                            let col: Vec<f64> = (0..n).map(|i| ta.data[i * m + j]).collect();
                            data.push(lse_slice(&col));
                        }
                        Tensor::vector(data)
                    }
                    _ => panic!("log_sum_exp axis {} out of range", axis),
                }
            }
            _ => panic!("log_sum_exp on shape {:?}", ta.shape),
        };
        self.push(out, rg, Op::LogSumExp(a, axis))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols(), m, "concat_rows column mismatch");
            n += t.rows();
            data.extend_from_slice(&t.data);
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::matrix(n, m, data), rg, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p.0].value.cols()).collect();
        let m: usize = widths.iter().sum();
        let mut data = vec![0.0; n * m];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.rows(), n, "concat_cols row mismatch");
            for i in 0..n {
                data[i * m + off..i * m + off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::matrix(n, m, data), rg, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        let (n, m) = (ta.rows(), ta.cols());
        assert!(start + len <= m, "slice_cols [{}, {}) out of {} cols", start, start + len, m);
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&ta.data[i * m + start..i * m + start + len]);
        }
        let rg = self.needs(a);
        self.push(Tensor::matrix(n, len, data), rg, Op::SliceCols(a, start, len))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    /// Per-row layer normalization: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (tx, tg, tb) =
            (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let (n, m) = (tx.rows(), tx.cols());
        assert_eq!(tg.shape, vec![m], "layer_norm gamma shape");
        assert_eq!(tb.shape, vec![m], "layer_norm beta shape");
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..m {
                data[i * m + j] = tg.data[j] * (row[j] - mean) * inv + tb.data[j];
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Tensor::matrix(n, m, data), rg, Op::LayerNorm(x, gamma, beta))
    }

    // ---- backward ------------------------------------------------------

    fn add_grad(&mut self, v: Var, g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => node.grad = Some(g.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: no further ops
    /// may be recorded, grads stay readable.
    pub fn backward(&mut self, loss: Var) {
        assert!(!self.completed, "backward already ran on this tape");
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward wants a scalar loss");
        self.completed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            self.backward_node(idx);
        }
    }

    fn backward_node(&mut self, idx: usize) {
        let g = self.nodes[idx].grad.clone().unwrap();
        // Ops hold only Vars and metadata, so the match below can borrow
        // values from `self.nodes` while accumulating into inputs.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                if self.needs(a) {
                    // dA = dOut * B^T
                    let bd = &self.nodes[b.0].value.data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * bd[p * n + j];
                            }
                        }
                    }
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    // dB = A^T * dOut
                    let ad = self.nodes[a.0].value.data.clone();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, &g);
                self.add_grad(b, &g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[b.0].value.data).map(|(x, y)| x * y).collect();
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> =
                        g.iter().zip(&self.nodes[a.0].value.data).map(|(x, y)| x * y).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                let m = self.nodes[row.0].value.numel();
                self.add_grad(a, &g);
                if self.needs(row) {
                    let mut dr = vec![0.0; m];
                    for (i, gv) in g.iter().enumerate() {
                        dr[i % m] += gv;
                    }
                    self.add_grad(row, &dr);
                }
            }
            Op::SubCol(a, col) => {
                let (a, col) = (*a, *col);
                let n = self.nodes[col.0].value.numel();
                let m = g.len() / n;
                self.add_grad(a, &g);
                if self.needs(col) {
                    let mut dc = vec![0.0; n];
                    for i in 0..n {
                        dc[i] = -g[i * m..(i + 1) * m].iter().sum::<f64>();
                    }
                    self.add_grad(col, &dc);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_grad(a, &da);
            }
            Op::Relu(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Exp(a) => {
                let a = *a;
                let da: Vec<f64> =
                    g.iter().zip(&self.nodes[idx].value.data).map(|(gv, y)| gv * y).collect();
                self.add_grad(a, &da);
            }
            Op::Transpose(a) => {
                let a = *a;
                let (n, m) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] = g[j * n + i];
                    }
                }
                self.add_grad(a, &da);
            }
            Op::GatherRows(table, ids) => {
                let table = *table;
                let ids = ids.clone();
                let (v, d) = (self.nodes[table.0].value.rows(), self.nodes[table.0].value.cols());
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[i * d + j];
                    }
                }
                self.add_grad(table, &dt);
            }
            Op::SelectPerRow(a, ids) => {
                let a = *a;
                let ids = ids.clone();
                let (n, m) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let mut da = vec![0.0; n * m];
                for (i, &id) in ids.iter().enumerate() {
                    da[i * m + id] = g[i];
                }
                self.add_grad(a, &da);
            }
            Op::LogSumExp(a, axis) => {
                let (a, axis) = (*a, *axis);
                let ta_shape = self.nodes[a.0].value.shape.clone();
                let out = self.nodes[idx].value.clone();
                let input = &self.nodes[a.0].value;
                // d/dx_i lse(x) = exp(x_i - lse)
                let da: Vec<f64> = match ta_shape.len() {
                    1 => input.data.iter().map(|x| g[0] * (x - out.data[0]).exp()).collect(),
                    _ => {
                        let (n, m) = (ta_shape[0], ta_shape[1]);
                        let mut da = vec![0.0; n * m];
                        for i in 0..n {
                            for j in 0..m {
                                let (o, gv) = if axis == 1 {
                                    (out.data[i], g[i])
                                } else {
                                    (out.data[j], g[j])
                                };
                                da[i * m + j] = gv * (input.data[i * m + j] - o).exp();
                            }
                        }
                        da
                    }
                };
                self.add_grad(a, &da);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let sz = self.nodes[p.0].value.numel();
                    let slice = g[off..off + sz].to_vec();
                    self.add_grad(p, &slice);
                    off += sz;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let n = self.nodes[idx].value.rows();
                let m = self.nodes[idx].value.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let mut dp = vec![0.0; n * w];
                    for i in 0..n {
                        dp[i * w..(i + 1) * w].copy_from_slice(&g[i * m + off..i * m + off + w]);
                    }
                    self.add_grad(p, &dp);
                    off += w;
                }
            }
            Op::SliceCols(a, start, len) => {
                let (a, start, len) = (*a, *start, *len);
                let (n, m) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    da[i * m + start..i * m + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.add_grad(a, &da);
            }
            Op::SumAll(a) => {
                let a = *a;
                let da = vec![g[0]; self.nodes[a.0].value.numel()];
                self.add_grad(a, &da);
            }
            Op::LayerNorm(x, gamma, beta) => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let tx = self.nodes[x.0].value.clone();
                let tg = self.nodes[gamma.0].value.clone();
                let (n, m) = (tx.rows(), tx.cols());
                let mf = m as f64;
                let mut dx = vec![0.0; n * m];
                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                for i in 0..n {
                    let row = tx.row(i);
                    let grow = &g[i * m..(i + 1) * m];
                    let mean = row.iter().sum::<f64>() / mf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / mf;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    // xhat_j = (x_j - mean) * inv; dy/dxhat = gamma
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..m {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * tg.data[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    for j in 0..m {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * tg.data[j];
                        dx[i * m + j] =
                            inv * (dxhat - sum_dxhat / mf - xhat * sum_dxhat_xhat / mf);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dgamma);
                self.add_grad(beta, &dbeta);
            }
        }
    }
}

/// Max-shifted log-sum-exp of a non-empty slice.
pub fn lse_slice(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Maximum relative error between analytic gradients of `f` at `x` and
/// central finite differences `(f(x+eps) - f(x-eps)) / 2 eps`.
///
/// Any panic or non-finite value inside `f` is reported as `f64::INFINITY`
/// rather than a silent pass.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    assert!(eps > 0.0, "grad_check wants eps > 0");
    let analytic = match catch_unwind(AssertUnwindSafe(|| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let loss = f(&mut tape, xv);
        assert_eq!(tape.value(loss).numel(), 1, "grad_check wants a scalar-valued function");
        tape.backward(loss);
        tape.grad(xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()])
    })) {
        Ok(g) => g,
        Err(_) => return f64::INFINITY,
    };

    let eval = |pt: &Tensor| -> Option<f64> {
        catch_unwind(AssertUnwindSafe(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(pt.clone());
            let loss = f(&mut tape, xv);
            tape.value(loss).item()
        }))
        .ok()
    };

    let mut max_err: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let (fp, fm) = match (eval(&plus), eval(&minus)) {
            (Some(a), Some(b)) => (a, b),
            _ => return f64::INFINITY,
        };
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return f64::INFINITY;
        }
        let err = (a - numeric).abs() / a.abs().max(1.0);
        max_err = max_err.max(err);
    }
    max_err
}
