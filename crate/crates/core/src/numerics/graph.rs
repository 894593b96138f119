//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation eagerly: values are computed as nodes
//! are pushed, and [`Graph::backward`] walks the tape in reverse. Nodes are
//! appended in topological order, so every parent index is smaller than its
//! child's.

use rand::Rng;

use super::kernels;
use super::memtrack;
use super::params::{ParamGrads, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm(Var, Var, Var),
    Gelu(Var),
    MaskMul(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    ColScaleShift(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Mse(Var, Vec<f64>),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    aux: Vec<f64>,
    needs_grad: bool,
}

/// The tape. Parameters are borrowed from a [`ParamStore`] rather than copied.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: Option<&'a ParamStore>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Some(store),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, aux: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            aux,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, Vec::new(), false)
    }

    /// A value whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, Vec::new(), true)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::Contract("graph was built without a parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::Contract(format!("unknown parameter {}", id.0)));
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: Value::Borrowed(&p.tensor),
            op: Op::Param(id),
            aux: Vec::new(),
            needs_grad: p.trainable,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        memtrack::add_macs(m * k * n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), Vec::new(), needs))
    }

    /// `alpha · a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, alpha: f64) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n, alpha, &mut out);
        memtrack::add_macs(m * k * n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNT(a, b, alpha),
            Vec::new(),
            needs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(shape, out), op, Vec::new(), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`c` vector to every row of `x[r×c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).numel() != c {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(x, bias), Vec::new(), needs))
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim("add_const", self.shape(x), c.shape()));
        }
        let out: Vec<f64> = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddConst(x), Vec::new(), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, s), Vec::new(), needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut out = vec![0.0; t.numel()];
        kernels::softmax_rows(t.data(), t.cols(), &mut out)
            .ok_or_else(|| Error::Numeric("NaN entering softmax".into()))?;
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), Vec::new(), needs))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim("layer_norm", t.shape(), self.shape(gamma)));
        }
        let rows = t.rows();
        let mut out = vec![0.0; t.numel()];
        let mut aux = vec![0.0; t.numel() + rows];
        let (xhat, rstd) = aux.split_at_mut(t.numel());
        kernels::layer_norm(
            t.data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            &mut out,
            xhat,
            rstd,
        );
        let shape = t.shape().to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm(x, gamma, beta), aux, needs))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Gelu(x), Vec::new(), needs)
    }

    /// Inverted dropout: zeroes entries with probability `rate` and rescales
    /// survivors by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::MaskMul(x, mask), Vec::new(), needs)
    }

    /// Picks rows of a 2-D view by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", t.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows(x, idx.to_vec()),
            Vec::new(),
            needs,
        ))
    }

    /// Columns `[c0, c1)` of a 2-D view.
    pub fn slice_cols(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var> {
        let t = self.value(x);
        if c0 >= c1 || c1 > t.cols() {
            return Err(Error::dim("slice_cols", t.shape(), &[c0, c1]));
        }
        let out = t.cols_slice(c0, c1);
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceCols(x, c0, c1), Vec::new(), needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Empty("concat_cols".into()))?;
        let r = self.value(first).rows();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != r) {
            return Err(Error::dim("concat_cols", self.shape(first), self.shape(bad)));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![r, total], out),
            Op::ConcatCols(parts.to_vec()),
            Vec::new(),
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Empty("concat_rows".into()))?;
        let c = self.value(first).cols();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).cols() != c) {
            return Err(Error::dim("concat_rows", self.shape(first), self.shape(bad)));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::ConcatRows(parts.to_vec()),
            Vec::new(),
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), Vec::new(), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::dim("transpose", t.shape(), &[2]));
        }
        let out = t.transpose()?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Transpose(x), Vec::new(), needs))
    }

    /// `y[r, c] = x[r, c] · scale[c] + shift[c]` with constant scale and shift.
    pub fn col_scale_shift(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let c = self.value(x).cols();
        if scale.len() != c || shift.len() != c {
            return Err(Error::dim("col_scale_shift", self.shape(x), &[scale.len()]));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| (0..c).map(move |j| row[j] * scale[j] + shift[j]))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ColScaleShift(x, scale.to_vec()),
            Vec::new(),
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), Vec::new(), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), Vec::new(), needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * v).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Square(x), Vec::new(), needs)
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim("mse", self.shape(pred), target.shape()));
        }
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let s = p.iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Mse(pred, target.data().to_vec()),
            Vec::new(),
            needs,
        ))
    }

    /// Linear map over the last axis: `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let dy = match &node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &dy, &mut grads);
        }

        let mut param_nodes = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                param_nodes.push((i, id));
            }
        }
        Ok(Gradients {
            node: grads,
            param_nodes,
            n_params: self.params.map_or(0, ParamStore::len),
        })
    }

    fn backprop_node(&self, node: &Node<'_>, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    let g = slot(grads, *a, m * k);
                    kernels::gemm_nt(dy, val(*b).data(), m, n, k, 1.0, g);
                }
                if self.needs(*b) {
                    let g = slot(grads, *b, k * n);
                    kernels::gemm_tn(val(*a).data(), dy, m, k, n, g);
                }
            }
            Op::MatMulNT(a, b, alpha) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).rows();
                if self.needs(*a) {
                    let g = slot(grads, *a, m * k);
                    let mut tmp = vec![0.0; m * k];
                    kernels::gemm_nn(dy, val(*b).data(), m, n, k, &mut tmp);
                    g.iter_mut().zip(&tmp).for_each(|(x, t)| *x += alpha * t);
                }
                if self.needs(*b) {
                    let g = slot(grads, *b, n * k);
                    let mut tmp = vec![0.0; n * k];
                    kernels::gemm_tn(dy, val(*a).data(), m, n, k, &mut tmp);
                    g.iter_mut().zip(&tmp).for_each(|(x, t)| *x += alpha * t);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, dy.len()), dy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(slot(grads, *a, dy.len()), dy);
                }
                if self.needs(*b) {
                    let g = slot(grads, *b, dy.len());
                    g.iter_mut().zip(dy).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let g = slot(grads, *a, dy.len());
                    for ((x, d), o) in g.iter_mut().zip(dy).zip(val(*b).data()) {
                        *x += d * o;
                    }
                }
                if self.needs(*b) {
                    let g = slot(grads, *b, dy.len());
                    for ((x, d), o) in g.iter_mut().zip(dy).zip(val(*a).data()) {
                        *x += d * o;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.needs(*x) {
                    add_into(slot(grads, *x, dy.len()), dy);
                }
                if self.needs(*bias) {
                    let c = val(*bias).numel();
                    let g = slot(grads, *bias, c);
                    for row in dy.chunks(c) {
                        add_into(g, row);
                    }
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                add_into(slot(grads, *x, dy.len()), dy);
            }
            Op::Scale(x, s) => {
                let g = slot(grads, *x, dy.len());
                g.iter_mut().zip(dy).for_each(|(a, d)| *a += s * d);
            }
            Op::Softmax(x) => {
                let y = node.value.get();
                let c = y.cols();
                let g = slot(grads, *x, dy.len());
                for ((yr, dr), gr) in y.data().chunks(c).zip(dy.chunks(c)).zip(g.chunks_mut(c)) {
                    let s = kernels::dot(yr, dr);
                    for k in 0..c {
                        gr[k] += yr[k] * (dr[k] - s);
                    }
                }
            }
            Op::LayerNorm(x, gamma, beta) => {
                let d = val(*x).cols();
                let n = val(*x).numel();
                let (xhat, rstd) = node.aux.split_at(n);
                let gam = val(*gamma).data();
                if self.needs(*gamma) {
                    let g = slot(grads, *gamma, d);
                    for (dr, hr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for k in 0..d {
                            g[k] += dr[k] * hr[k];
                        }
                    }
                }
                if self.needs(*beta) {
                    let g = slot(grads, *beta, d);
                    for dr in dy.chunks(d) {
                        add_into(g, dr);
                    }
                }
                if self.needs(*x) {
                    let g = slot(grads, *x, n);
                    let mut dh = vec![0.0; d];
                    for (r, (dr, hr)) in dy.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for k in 0..d {
                            dh[k] = dr[k] * gam[k];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = kernels::dot(&dh, hr) / d as f64;
                        let gr = &mut g[r * d..(r + 1) * d];
                        for k in 0..d {
                            gr[k] += rstd[r] * (dh[k] - mean_dh - hr[k] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let g = slot(grads, *x, dy.len());
                for ((a, d), xv) in g.iter_mut().zip(dy).zip(val(*x).data()) {
                    *a += d * kernels::gelu_grad(*xv);
                }
            }
            Op::MaskMul(x, mask) => {
                let g = slot(grads, *x, dy.len());
                for ((a, d), m) in g.iter_mut().zip(dy).zip(mask) {
                    *a += d * m;
                }
            }
            Op::GatherRows(x, idx) => {
                let c = val(*x).cols();
                let g = slot(grads, *x, val(*x).numel());
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut g[src * c..(src + 1) * c], &dy[r * c..(r + 1) * c]);
                }
            }
            Op::SliceCols(x, c0, c1) => {
                let c = val(*x).cols();
                let w = c1 - c0;
                let g = slot(grads, *x, val(*x).numel());
                for (r, dr) in dy.chunks(w).enumerate() {
                    add_into(&mut g[r * c + c0..r * c + c1], dr);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.get().cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.needs(p) {
                        let g = slot(grads, p, val(p).numel());
                        for (r, gr) in g.chunks_mut(w).enumerate() {
                            add_into(gr, &dy[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if self.needs(p) {
                        add_into(slot(grads, p, n), &dy[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims2(*x);
                let g = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += dy[j * r + i];
                    }
                }
            }
            Op::ColScaleShift(x, scale) => {
                let c = scale.len();
                let g = slot(grads, *x, dy.len());
                for (gr, dr) in g.chunks_mut(c).zip(dy.chunks(c)) {
                    for k in 0..c {
                        gr[k] += dr[k] * scale[k];
                    }
                }
            }
            Op::Sum(x) => {
                let g = slot(grads, *x, val(*x).numel());
                g.iter_mut().for_each(|a| *a += dy[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let g = slot(grads, *x, n);
                let s = dy[0] / n as f64;
                g.iter_mut().for_each(|a| *a += s);
            }
            Op::Square(x) => {
                let g = slot(grads, *x, dy.len());
                for ((a, d), xv) in g.iter_mut().zip(dy).zip(val(*x).data()) {
                    *a += 2.0 * xv * d;
                }
            }
            Op::Mse(pred, target) => {
                let p = val(*pred).data();
                let s = 2.0 * dy[0] / p.len() as f64;
                let g = slot(grads, *pred, p.len());
                for ((a, pv), t) in g.iter_mut().zip(p).zip(target) {
                    *a += s * (pv - t);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    node: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<(usize, ParamId)>,
    n_params: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to an input or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients gathered per parameter; a parameter placed on the tape more
    /// than once gets the sum of its uses.
    pub fn param_grads(&self) -> ParamGrads {
        let mut out = ParamGrads::empty(self.n_params);
        for &(node, id) in &self.param_nodes {
            if let Some(g) = &self.node[node] {
                match &mut out.grads[id.0] {
                    Some(acc) => add_into(acc, g),
                    empty => *empty = Some(g.clone()),
                }
            }
        }
        out
    }
}
