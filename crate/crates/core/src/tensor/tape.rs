use std::borrow::Cow;

use super::kernels::{self, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise map with a user-supplied local derivative.
///
/// The backward pass multiplies the incoming gradient by
/// `derivative(x)` at the forward input, regardless of the true
/// derivative of `forward` (which may be zero or undefined).
pub trait CustomGradFn {
    fn forward(&self, x: f64) -> f64;
    fn derivative(&self, x: f64) -> f64;

    /// Whole-tensor forward. Must agree with `forward` elementwise.
    fn forward_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.forward(x)).collect()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    Custom { x: Var, local: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order. A tape can be differentiated once.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(Cow::Owned(t), op, needs_grad))
    }

    /// Registers an owned tensor; it participates in backward iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.push(Cow::Owned(t), Op::Leaf, needs_grad)
    }

    /// Registers a borrowed tensor without copying it.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, t.requires_grad)
    }

    /// Registers an owned tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(shape_err!("matmul inner dims {m}x{k} * {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.derived(&[m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(shape_err!("matmul_nt inner dims {m}x{k} * ({n}x{k2})^T"));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.derived(&[m, n], out, Op::MatMulNt(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.derived(&shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, mul: bool) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let (rr, rc) = self.dims(row)?;
        if rr != 1 || rc != c {
            return Err(shape_err!("row broadcast of [{rr},{rc}] over [{r},{c}]"));
        }
        let rv = self.data(row);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|xr| {
                xr.iter()
                    .zip(rv)
                    .map(move |(&a, &b)| if mul { a * b } else { a + b })
            })
            .collect();
        let op = if mul { Op::MulRow(x, row) } else { Op::AddRow(x, row) };
        self.derived(&[r, c], data, op, &[x, row])
    }

    /// Adds a `[1, c]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, false)
    }

    /// Multiplies every row of `x` elementwise by a `[1, c]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, true)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, Op::Scale(x, s), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat_rows of nothing"));
        }
        let (_, c) = self.dims(parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p)?;
            if pc != c {
                return Err(shape_err!("concat_rows column mismatch {pc} vs {c}"));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        self.derived(&[rows, c], data, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if len == 0 || start + len > r {
            return Err(shape_err!("slice_rows {start}+{len} out of {r} rows"));
        }
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        self.derived(&[len, c], data, Op::SliceRows(x, start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat_cols of nothing"));
        }
        let (r, _) = self.dims(parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r {
                return Err(shape_err!("concat_cols row mismatch {pr} vs {r}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        self.derived(&[r, total], data, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if len == 0 || start + len > c {
            return Err(shape_err!("slice_cols {start}+{len} out of {c} cols"));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.derived(&[r, len], data, Op::SliceCols(x, start), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let src = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.derived(&[c, r], data, Op::Transpose(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.derived(&[r, c], data, Op::SoftmaxRows(x), &[x])
    }

    /// Normalizes each row to zero mean and unit variance (population
    /// variance plus `eps`). No affine part; compose with `mul_row`/`add_row`.
    pub fn layernorm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("layernorm eps must be > 0, got {eps}")));
        }
        let (r, c) = self.dims(x)?;
        let mut data = self.data(x).to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.derived(&[r, c], data, Op::LayerNormRows { x, inv_std }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, Op::Gelu(x), &[x])
    }

    /// Column means: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let mut data = vec![0.0; c];
        for row in self.data(x).chunks(c) {
            data.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        self.derived(&[1, c], data, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.derived(&[1], vec![s], Op::Sum(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims(logits)?;
        if labels.len() != b {
            return Err(shape_err!("{} labels for a batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} outside [0, {c})")));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, &label) in self.data(logits).chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        loss /= b as f64;
        let op = Op::CrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        self.derived(&[1], vec![loss], op, &[logits])
    }

    pub fn apply_custom(&mut self, x: Var, f: &dyn CustomGradFn) -> Result<Var> {
        let input = self.data(x);
        let data = f.forward_all(input);
        if data.len() != input.len() {
            return Err(shape_err!("custom forward changed the element count"));
        }
        let local: Vec<f64> = input.iter().map(|&v| f.derivative(v)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, Op::Custom { x, local }, &[x])
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_from(&[(loss, vec![1.0])])
    }

    /// Vector-Jacobian product seeded at several outputs at once.
    pub fn backward_from(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(shape_err!("seed gradient length {} for node of {:?}", g.len(), self.shape(*v)));
            }
            if self.nodes[v.0].needs_grad {
                accumulate(&mut self.grads, v.0, self.nodes[v.0].value.len(), |acc| {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b)
                });
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`, if it received any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| nodes[v.0].value.data();
        let ng = |v: Var| nodes[v.0].needs_grad;
        let len = |v: Var| nodes[v.0].value.len();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.dims2().unwrap().1;
                if ng(*a) {
                    accumulate(grads, a.0, m * k, |acc| matmul_nt_acc(g, val(*b), acc, m, n, k));
                }
                if ng(*b) {
                    accumulate(grads, b.0, k * n, |acc| matmul_tn_acc(val(*a), g, acc, k, m, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.dims2().unwrap().0;
                if ng(*a) {
                    accumulate(grads, a.0, m * k, |acc| matmul_acc(g, val(*b), acc, m, n, k));
                }
                if ng(*b) {
                    accumulate(grads, b.0, n * k, |acc| matmul_tn_acc(g, val(*a), acc, n, m, k));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if ng(*v) {
                        accumulate(grads, v.0, g.len(), |acc| add_into(acc, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    accumulate(grads, a.0, g.len(), |acc| add_into(acc, g));
                }
                if ng(*b) {
                    accumulate(grads, b.0, g.len(), |acc| {
                        acc.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                    });
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    accumulate(grads, a.0, g.len(), |acc| {
                        for ((x, gi), bv) in acc.iter_mut().zip(g).zip(val(*b)) {
                            *x += gi * bv;
                        }
                    });
                }
                if ng(*b) {
                    accumulate(grads, b.0, g.len(), |acc| {
                        for ((x, gi), av) in acc.iter_mut().zip(g).zip(val(*a)) {
                            *x += gi * av;
                        }
                    });
                }
            }
            Op::AddRow(x, row) => {
                let c = len(*row);
                if ng(*x) {
                    accumulate(grads, x.0, g.len(), |acc| add_into(acc, g));
                }
                if ng(*row) {
                    accumulate(grads, row.0, c, |acc| {
                        for gr in g.chunks(c) {
                            add_into(acc, gr);
                        }
                    });
                }
            }
            Op::MulRow(x, row) => {
                let c = len(*row);
                let rv = val(*row);
                if ng(*x) {
                    accumulate(grads, x.0, g.len(), |acc| {
                        for (ar, gr) in acc.chunks_mut(c).zip(g.chunks(c)) {
                            for ((a, gi), r) in ar.iter_mut().zip(gr).zip(rv) {
                                *a += gi * r;
                            }
                        }
                    });
                }
                if ng(*row) {
                    let xv = val(*x);
                    accumulate(grads, row.0, c, |acc| {
                        for (gr, xr) in g.chunks(c).zip(xv.chunks(c)) {
                            for ((a, gi), xi) in acc.iter_mut().zip(gr).zip(xr) {
                                *a += gi * xi;
                            }
                        }
                    });
                }
            }
            Op::Scale(x, s) => {
                if ng(*x) {
                    accumulate(grads, x.0, g.len(), |acc| {
                        acc.iter_mut().zip(g).for_each(|(a, gi)| *a += gi * s)
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = len(*p);
                    if ng(*p) {
                        accumulate(grads, p.0, n, |acc| add_into(acc, &g[offset..offset + n]));
                    }
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                if ng(*x) {
                    let c = nodes[x.0].value.dims2().unwrap().1;
                    accumulate(grads, x.0, len(*x), |acc| {
                        add_into(&mut acc[start * c..start * c + g.len()], g)
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.dims2().unwrap().1;
                let mut col = 0;
                for p in parts {
                    let (r, w) = nodes[p.0].value.dims2().unwrap();
                    if ng(*p) {
                        accumulate(grads, p.0, r * w, |acc| {
                            for row in 0..r {
                                add_into(
                                    &mut acc[row * w..(row + 1) * w],
                                    &g[row * total + col..row * total + col + w],
                                );
                            }
                        });
                    }
                    col += w;
                }
            }
            Op::SliceCols(x, start) => {
                if ng(*x) {
                    let (r, c) = nodes[x.0].value.dims2().unwrap();
                    let w = g.len() / r;
                    accumulate(grads, x.0, r * c, |acc| {
                        for row in 0..r {
                            add_into(
                                &mut acc[row * c + start..row * c + start + w],
                                &g[row * w..(row + 1) * w],
                            );
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                if ng(*x) {
                    let (r, c) = nodes[x.0].value.dims2().unwrap();
                    accumulate(grads, x.0, r * c, |acc| {
                        for a in 0..r {
                            for b in 0..c {
                                acc[a * c + b] += g[b * r + a];
                            }
                        }
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                if ng(*x) {
                    let c = nodes[x.0].value.dims2().unwrap().1;
                    accumulate(grads, x.0, g.len(), |acc| {
                        for ((ar, gr), yr) in acc.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                            let s = dot(gr, yr);
                            for ((a, gi), yi) in ar.iter_mut().zip(gr).zip(yr) {
                                *a += yi * (gi - s);
                            }
                        }
                    });
                }
            }
            Op::LayerNormRows { x, inv_std } => {
                if ng(*x) {
                    let c = nodes[x.0].value.dims2().unwrap().1;
                    let cf = c as f64;
                    accumulate(grads, x.0, g.len(), |acc| {
                        for (((ar, gr), yr), inv) in acc
                            .chunks_mut(c)
                            .zip(g.chunks(c))
                            .zip(out.chunks(c))
                            .zip(inv_std)
                        {
                            let mean_g = gr.iter().sum::<f64>() / cf;
                            let mean_gy = dot(gr, yr) / cf;
                            for ((a, gi), yi) in ar.iter_mut().zip(gr).zip(yr) {
                                *a += inv * (gi - mean_g - yi * mean_gy);
                            }
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                if ng(*x) {
                    let xv = val(*x);
                    accumulate(grads, x.0, g.len(), |acc| {
                        for ((a, gi), xi) in acc.iter_mut().zip(g).zip(xv) {
                            *a += gi * kernels::gelu_grad(*xi);
                        }
                    });
                }
            }
            Op::MeanRows(x) => {
                if ng(*x) {
                    let (r, c) = nodes[x.0].value.dims2().unwrap();
                    let inv = 1.0 / r as f64;
                    accumulate(grads, x.0, r * c, |acc| {
                        for ar in acc.chunks_mut(c) {
                            ar.iter_mut().zip(g).for_each(|(a, gi)| *a += gi * inv);
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if ng(*x) {
                    accumulate(grads, x.0, len(*x), |acc| acc.iter_mut().for_each(|a| *a += g[0]));
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                if ng(*logits) {
                    let (b, c) = nodes[logits.0].value.dims2().unwrap();
                    let scale = g[0] / b as f64;
                    accumulate(grads, logits.0, b * c, |acc| {
                        for (r, &label) in labels.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                acc[r * c + j] += scale * (probs[r * c + j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::Custom { x, local } => {
                if ng(*x) {
                    accumulate(grads, x.0, g.len(), |acc| {
                        for ((a, gi), d) in acc.iter_mut().zip(g).zip(local) {
                            *a += gi * d;
                        }
                    });
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, n: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}
