//! Linear Wengert tape for reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value and the information
//! needed to propagate gradients. Nodes only reference earlier nodes, so the
//! insertion order is already a topological order and `backward` is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { a: Var, row: Var },
    Gelu(Var),
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::AddRow { a, row } => self.rg(*a) || self.rg(*row),
            Op::LayerNorm { x, gain, bias, .. } => self.rg(*x) || self.rg(*gain) || self.rg(*bias),
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.iter().any(|v| self.rg(*v)),
            Op::GatherRows { table, .. } => self.rg(*table),
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Softmax { a, .. }
            | Op::LogSoftmax(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Sum(a) => self.rg(*a),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. `requires_grad` leaves receive gradients on `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(dim_err(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, b_t: false }, "matmul")
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_t")?;
        let (n, k2) = self.mat(b, "matmul_t")?;
        if k != k2 {
            return Err(dim_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, b_t: true }, "matmul_t")
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect());
        self.push(t, Op::Scale(a, s), "scale")
    }

    /// Adds a length-`n` vector to every row of an `..×n` tensor. The only
    /// broadcast the tape supports.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.value(a).as_matrix();
        if self.value(row).len() != n {
            return Err(dim_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let v = self.value(a);
        let data = v
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(x, b)| x + b))
            .collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(t, Op::AddRow { a, row }, "add_row")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(t, Op::Gelu(a), "gelu")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { a, outer, len, inner },
            "softmax",
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (_, n) = v.as_matrix();
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(t, Op::LogSoftmax(a), "log_softmax")
    }

    /// Normalizes each row over the last extent, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.value(x).as_matrix();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, "layer_norm")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.mat(a, "transpose")?;
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), "transpose")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (_, c) = self.mat(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c2) = self.mat(p, "concat_rows")?;
            if c2 != c {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (r, _) = self.mat(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.mat(p, "concat_cols")?;
            if r2 != r {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::from_parts(vec![r, total], data), Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat(a, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(dim_err("slice_rows", self.shape(a), &[start, len]));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::from_parts(vec![len, c], data), Op::SliceRows { a, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat(a, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(dim_err("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::from_parts(vec![r, len], data), Op::SliceCols { a, start }, "slice_cols")
    }

    /// Row lookup, e.g. token embeddings.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.mat(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("row id {bad} out of range for table of {v}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::GatherRows { table, ids: ids.to_vec() },
            "gather_rows",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            self.propagate(i, &dy);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, dy: &[f64]) {
        // Temporarily move the op out so the tape can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let rg = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| &nodes[v.0].value;
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (m, k) = val(&*a).as_matrix();
                let n = dy.len() / m;
                if rg(&*a) {
                    let bv = nodes[b.0].value.data();
                    let da = acc(nodes, grads, *a).unwrap();
                    // da += dy · bᵀ (or dy · b when b is stored transposed)
                    gemm(m, n, k, dy, false, bv, !*b_t, da, 1.0);
                }
                if rg(&*b) {
                    let av = nodes[a.0].value.data();
                    let db = acc(nodes, grads, *b).unwrap();
                    if *b_t {
                        gemm(n, m, k, dy, true, av, false, db, 1.0);
                    } else {
                        gemm(k, m, n, av, true, dy, false, db, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = acc(nodes, grads, v) {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = acc(nodes, grads, *a) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = acc(nodes, grads, *b) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                if rg(&*a) {
                    let bv = nodes[b.0].value.data();
                    let g = acc(nodes, grads, *a).unwrap();
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * y;
                    }
                }
                if rg(&*b) {
                    let av = nodes[a.0].value.data();
                    let g = acc(nodes, grads, *b).unwrap();
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                if let Some(g) = acc(nodes, grads, *a) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * s);
                }
            }
            Op::AddRow { a, row } => {
                if let Some(g) = acc(nodes, grads, *a) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = acc(nodes, grads, *row) {
                    let n = g.len();
                    for chunk in dy.chunks(n) {
                        g.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Gelu(a) => {
                if rg(&*a) {
                    let x = nodes[a.0].value.data();
                    let g = acc(nodes, grads, *a).unwrap();
                    for ((g, d), &x) in g.iter_mut().zip(dy).zip(x) {
                        *g += d * gelu_grad(x);
                    }
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                if rg(&*a) {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    let y = nodes[i].value.data();
                    let g = acc(nodes, grads, *a).unwrap();
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + k;
                            let dot: f64 = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] += y[at(j)] * (dy[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if rg(&*a) {
                    let y = nodes[i].value.data();
                    let (_, n) = nodes[i].value.as_matrix();
                    let g = acc(nodes, grads, *a).unwrap();
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = dr.iter().sum();
                        for j in 0..n {
                            gr[j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = val(&*gain).len();
                if rg(&*gain) {
                    let g = acc(nodes, grads, *gain).unwrap();
                    for (dr, hr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                }
                if rg(&*bias) {
                    let g = acc(nodes, grads, *bias).unwrap();
                    for dr in dy.chunks(d) {
                        g.iter_mut().zip(dr).for_each(|(g, d)| *g += d);
                    }
                }
                if rg(&*x) {
                    let gain_v = nodes[gain.0].value.data();
                    let g = acc(nodes, grads, *x).unwrap();
                    let mut dh = vec![0.0; d];
                    for (r, s) in rstd.iter().enumerate() {
                        let dr = &dy[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = dr[j] * gain_v[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            g[r * d + j] += s * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(g) = acc(nodes, grads, *a) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(&*a).as_matrix();
                if let Some(g) = acc(nodes, grads, *a) {
                    for p in 0..r {
                        for q in 0..c {
                            g[p * c + q] += dy[q * r + p];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(&p).len();
                    if let Some(g) = acc(nodes, grads, p) {
                        g.iter_mut().zip(&dy[offset..offset + n]).for_each(|(g, d)| *g += d);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.as_matrix().1;
                let mut col = 0;
                for &p in parts {
                    let (r, w) = val(&p).as_matrix();
                    if let Some(g) = acc(nodes, grads, p) {
                        for row in 0..r {
                            for j in 0..w {
                                g[row * w + j] += dy[row * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { a, start } => {
                let (_, c) = val(&*a).as_matrix();
                let start = *start;
                if let Some(g) = acc(nodes, grads, *a) {
                    g[start * c..start * c + dy.len()]
                        .iter_mut()
                        .zip(dy)
                        .for_each(|(g, d)| *g += d);
                }
            }
            Op::SliceCols { a, start } => {
                let (r, c) = val(&*a).as_matrix();
                let w = dy.len() / r;
                let start = *start;
                if let Some(g) = acc(nodes, grads, *a) {
                    for row in 0..r {
                        for j in 0..w {
                            g[row * c + start + j] += dy[row * w + j];
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let (_, d) = val(&*table).as_matrix();
                if let Some(g) = acc(nodes, grads, *table) {
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += dy[k * d + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let d = dy[0];
                if let Some(g) = acc(nodes, grads, *a) {
                    g.iter_mut().for_each(|g| *g += d);
                }
            }
        }
        self.nodes[i].op = op;
    }


    /// Gradient of a leaf after `backward`; `None` when it never received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}
