use std::borrow::Cow;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `sqrt(2 / pi)` in the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh approximation of GELU.
pub const GELU_COEFF: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    PairwiseSqDist(Var, Var),
    PickPerRow {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Ordered operation record. Nodes are appended after their parents, so the
/// index order is a topological order and backward is a single reverse sweep.
///
/// Leaves may borrow their value (`'a`) so frozen weights are never copied.
pub struct Tape<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf borrowing its value.
    pub fn param_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// Constant leaf borrowing its value.
    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaves created with `param`/`param_ref`, in creation order.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(
                op,
                format!("expected a matrix, got {}", shape_str(s)),
            )),
        }
    }

    // ── linear algebra ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!(
                    "{} x {}",
                    shape_str(self.shape(a)),
                    shape_str(self.shape(b))
                ),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let s = av[i * k + kk];
                let brow = &bv[kk * n..(kk + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o = *o + s * bb;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let av = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    // ── elementwise ───────────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!(
                    "{} vs {}",
                    shape_str(self.shape(a)),
                    shape_str(self.shape(b))
                ),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a[.., j] + bias[j]`: adds a vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(bias).numel() != c {
            return Err(Error::dim(
                "add_row",
                format!(
                    "{} + {}",
                    shape_str(self.shape(a)),
                    shape_str(self.shape(bias))
                ),
            ));
        }
        let av = self.value(a);
        let bv = self.value(bias).data();
        let data = av
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| x * s).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(GELU_SQRT_2_OVER_PI * (x + GELU_COEFF x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| gelu(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    // ── reductions ────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    // ── row-wise normalizations ───────────────────────────────────────

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(av.numel());
        for row in av.data().chunks_exact(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut z = T::zero();
            for &x in row {
                let e = (x - mx).exp();
                z = z + e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e = *e / z;
            }
        }
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(av.numel());
        for row in av.data().chunks_exact(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Per-row standardization over the last dim followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {} with gain {} and bias {}",
                    shape_str(self.shape(x)),
                    shape_str(self.shape(gain)),
                    shape_str(self.shape(bias))
                ),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = T::of(d as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(d) {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mu) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for (i, row) in xv.data().chunks_exact(d).enumerate() {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !nrm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "l2_normalize: row {i} has norm {nrm:?}"
                )));
            }
            if nrm == T::zero() {
                return Err(Error::Degenerate(format!(
                    "l2_normalize: row {i} has zero norm"
                )));
            }
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / nrm));
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::L2Normalize { x, norms }, rg))
    }

    // ── indexing and layout ───────────────────────────────────────────

    /// Embedding lookup: output row `r` is `table[idx[r]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(table, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim(
                "gather_rows",
                format!("index {bad} out of range for {n} rows"),
            ));
        }
        let tv = self.value(table);
        let data = idx
            .iter()
            .flat_map(|&i| tv.row(i).iter().copied())
            .collect();
        let value = Tensor::new(vec![idx.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::dim(
                    "concat_rows",
                    format!(
                        "{} vs {}",
                        shape_str(self.shape(first)),
                        shape_str(self.shape(p))
                    ),
                ));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::dim(
                    "concat_cols",
                    format!(
                        "{} vs {}",
                        shape_str(self.shape(first)),
                        shape_str(self.shape(p))
                    ),
                ));
            }
            cols += pc;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![r, cols], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!(
                    "columns {start}..{} of {}",
                    start + len,
                    shape_str(self.shape(x))
                ),
            ));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// `out[i, j] = ||a_i - b_j||^2` for `a: [m, D]`, `b: [n, D]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.dims2(a, "pairwise_sq_dist")?;
        let (n, d2) = self.dims2(b, "pairwise_sq_dist")?;
        if d != d2 {
            return Err(Error::dim(
                "pairwise_sq_dist",
                format!(
                    "{} vs {}",
                    shape_str(self.shape(a)),
                    shape_str(self.shape(b))
                ),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ai = av.row(i);
            for j in 0..n {
                let s = ai
                    .iter()
                    .zip(bv.row(j))
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum();
                out.push(s);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::PairwiseSqDist(a, b), rg))
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "pick_per_row")?;
        if idx.len() != m {
            return Err(Error::dim(
                "pick_per_row",
                format!("{} indices for {m} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::dim(
                "pick_per_row",
                format!("column {bad} out of range for {n} columns"),
            ));
        }
        let xv = self.value(x);
        let data = idx.iter().enumerate().map(|(i, &j)| xv.row(i)[j]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![m], data)?,
            Op::PickPerRow {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ── reverse sweep ─────────────────────────────────────────────────

    /// Propagates d(loss)/d(node) back to every `requires_grad` leaf,
    /// adding into the leaf's stored gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + *v;
                        }
                    }
                    None => {
                        node.grad = Some(Tensor {
                            shape: node.value.shape().to_vec(),
                            data: g,
                        });
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        // Adds into the gradient buffer of `p`, allocating it on first use.
        let mut acc = |p: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[p.0].requires_grad {
                return;
            }
            let buf = grads[p.0].get_or_insert_with(|| vec![T::zero(); nodes[p.0].value.numel()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                acc(*a, &mut |da| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            let s: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            da[r * k + kk] = da[r * k + kk] + s;
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let s = av[r * k + kk];
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for (d, &x) in drow.iter_mut().zip(grow) {
                                *d = *d + s * x;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |d| {
                    for ((x, &gy), &y) in d.iter_mut().zip(g).zip(bv) {
                        *x = *x + gy * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, &gy), &y) in d.iter_mut().zip(g).zip(av) {
                        *x = *x + gy * y;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |d| add_into(d, g));
                let c = nodes[bias.0].value.numel();
                acc(*bias, &mut |d| {
                    for row in g.chunks_exact(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| {
                for (x, &y) in d.iter_mut().zip(g) {
                    *x = *x + *s * y;
                }
            }),
            Op::Gelu(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for ((x, &gy), &v) in d.iter_mut().zip(g).zip(av) {
                        *x = *x + gy * gelu_grad(v);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                acc(*a, &mut |d| {
                    for ii in 0..r {
                        for j in 0..c {
                            d[ii * c + j] = d[ii * c + j] + g[j * r + ii];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Sum(a) => acc(*a, &mut |d| {
                for x in d.iter_mut() {
                    *x = *x + g[0];
                }
            }),
            Op::Mean(a) => {
                let s = g[0] / T::of(nodes[a.0].value.numel() as f64);
                acc(*a, &mut |d| {
                    for x in d.iter_mut() {
                        *x = *x + s;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = out.data();
                let c = out.cols();
                acc(*a, &mut |d| {
                    for ((dr, gr), yr) in d
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(y.chunks_exact(c))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for ((x, &gy), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *x = *x + yy * (gy - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = out.data();
                let c = out.cols();
                acc(*a, &mut |d| {
                    for ((dr, gr), yr) in d
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(y.chunks_exact(c))
                    {
                        let gs: T = gr.iter().copied().sum();
                        for ((x, &gy), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *x = *x + gy - yy.exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = nodes[gain.0].value.data();
                let dim = gv.len();
                let n = T::of(dim as f64);
                acc(*x, &mut |d| {
                    for (r, ((dr, gr), hr)) in d
                        .chunks_exact_mut(dim)
                        .zip(g.chunks_exact(dim))
                        .zip(xhat.chunks_exact(dim))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..dim {
                            let dh = gr[j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for j in 0..dim {
                            let dh = gr[j] * gv[j];
                            dr[j] = dr[j] + rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (gr, hr) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                        for j in 0..dim {
                            d[j] = d[j] + gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for gr in g.chunks_exact(dim) {
                        add_into(d, gr);
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = out.data();
                let c = out.cols();
                acc(*x, &mut |d| {
                    for (r, ((dr, gr), yr)) in d
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(y.chunks_exact(c))
                        .enumerate()
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for ((v, &gy), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *v = *v + (gy - yy * dot) / norms[r];
                        }
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                let c = out.cols();
                acc(*table, &mut |d| {
                    for (r, &t) in idx.iter().enumerate() {
                        add_into(&mut d[t * c..(t + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.cols();
                    acc(p, &mut |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * pc..(r + 1) * pc],
                                &g[r * total + off..r * total + off + pc],
                            );
                        }
                    });
                    off += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for (r, gr) in g.chunks_exact(w).enumerate() {
                        add_into(&mut d[r * c + start..r * c + start + w], gr);
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, dim) = (av.rows(), av.cols());
                let n = bv.rows();
                let two = T::of(2.0);
                acc(*a, &mut |da| {
                    for ii in 0..m {
                        let ai = av.row(ii);
                        let dai = &mut da[ii * dim..(ii + 1) * dim];
                        for j in 0..n {
                            let s = two * g[ii * n + j];
                            for ((dd, &x), &y) in dai.iter_mut().zip(ai).zip(bv.row(j)) {
                                *dd = *dd + s * (x - y);
                            }
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for j in 0..n {
                        let bj = bv.row(j);
                        let dbj = &mut db[j * dim..(j + 1) * dim];
                        for ii in 0..m {
                            let s = two * g[ii * n + j];
                            for ((dd, &x), &y) in dbj.iter_mut().zip(av.row(ii)).zip(bj) {
                                *dd = *dd - s * (x - y);
                            }
                        }
                    }
                });
            }
            Op::PickPerRow { x, idx } => {
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for (r, &j) in idx.iter().enumerate() {
                        d[r * c + j] = d[r * c + j] + g[r];
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_SQRT_2_OVER_PI);
    let k = T::of(GELU_COEFF);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_SQRT_2_OVER_PI);
    let k = T::of(GELU_COEFF);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_projector_row() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2, 2], &[1., 0., 0., 0.]));
        let v = tape.constant(t(&[2, 1], &[5., 7.]));
        let y = tape.matmul(p, v).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1]);
        assert_eq!(tape.value(y).data(), &[5., 0.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f32>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f32>::zeros(&[4, 2]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[5., 5., 5., 5.]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn layer_norm_normalized_row_is_fixed_point() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1., -1.]).unwrap());
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_rejects_gain_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[2, 4]));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(
            tape.layer_norm(x, g, b, 1e-6),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0., 0., 0.]));
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = tape.constant(t(&[1, 2], &[1000., 0.]));
        let y = tape.softmax(x);
        let out = tape.value(y).data();
        assert_eq!(out[0], 1.0);
        assert!(out[1] < 1e-30);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[3., 4.]));
        let y = tape.l2_normalize(x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.6).abs() < 1e-7 && (out[1] - 0.8).abs() < 1e-7);

        let u = tape.constant(t(&[1, 3], &[0., 1., 0.]));
        let y = tape.l2_normalize(u).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 1., 0.]);

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.l2_normalize(z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1., -2., 3., 0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn backward_half_square_is_identity() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1., -2., 3., 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), tape.value(x).data());
    }

    #[test]
    fn backward_accumulates_and_zero_grad_resets() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., 2., 3.]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 2., 2.]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let w = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let x = tape.param(t(&[1, 2], &[1., 1.]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3., 7.]);
    }

    #[test]
    fn gelu_matches_reference_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap());
        let y = tape.gelu(x);
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        // tanh-approximate GELU reference values
        assert!((out[1] - 0.841_191_990_607_477_2).abs() < 1e-12);
        assert!((out[2] + 0.158_808_009_392_522_8).abs() < 1e-12);
    }

    #[test]
    fn gather_concat_slice_layout() {
        let mut tape = Tape::new();
        let table = tape.constant(t(&[3, 2], &[0., 1., 10., 11., 20., 21.]));
        let g = tape.gather_rows(table, &[2, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[20., 21., 0., 1.]);
        let c = tape.concat_rows(&[g, table]).unwrap();
        assert_eq!(tape.shape(c), &[5, 2]);
        let cc = tape.concat_cols(&[g, g]).unwrap();
        assert_eq!(tape.value(cc).data(), &[20., 21., 20., 21., 0., 1., 0., 1.]);
        let s = tape.slice_cols(cc, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[21., 20., 1., 0.]);
        assert!(tape.gather_rows(table, &[3]).is_err());
    }
}
