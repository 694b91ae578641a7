//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to run its adjoint. [`Tape::backward`] walks the nodes in
//! reverse insertion order, so the gradient pass is a single sweep with a
//! fixed accumulation order.
//!
//! Nodes are *tracked* when at least one input is tracked; leaves are
//! tracked iff the source tensor has `requires_grad` and the tape was not
//! built with [`Tape::no_grad`]. Untracked nodes never receive gradients.

use super::kernels::{gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    Sum(Var),
    AddN(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row {
        x: Var,
        index: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn zeroed<T: Scalar>(slot: &mut Option<Vec<T>>, n: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); n])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose leaves are never tracked; used for inference.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Copies the node value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[])),
        }
    }

    /// Records a tensor as a leaf. Tracked iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let tracked = self.grad_enabled && t.requires_grad();
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, tracked)
    }

    /// Records an untracked input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() || shape.contains(&0) {
            return Err(Error::dim("constant", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), tracked))
    }

    /// `a · bᵀ`, the layout used by every linear layer (`b` is `out × in`).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::dim("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulT(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(shape, out, Op::Add(a, b), tracked))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        if self.value(bias).len() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let tracked = self.tracked_any(&[x, bias]);
        Ok(self.push(vec![m, n], out, Op::AddRow(x, bias), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(shape, out, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked_any(&[x]);
        self.push(shape, out, Op::Scale(x, factor), tracked)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            tracked,
        ))
    }

    /// Normalizes each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = self.value(x).len() / n;
        let nf = T::of(n as f64);
        let src = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.tracked_any(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked_any(&[x]);
        self.push(shape, out, Op::Gelu(x), tracked)
    }

    /// `-log softmax(logits)[label]`; `logits` is read flat.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if label >= z.len() {
            return Err(Error::Index {
                what: "label",
                index: label,
                bound: z.len(),
            });
        }
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let loss = total.ln() + max - z[label];
        let probs = exps.into_iter().map(|e| e / total).collect();
        let tracked = self.tracked_any(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let tracked = self.tracked_any(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), tracked)
    }

    /// Elementwise sum of same-shaped nodes, accumulated in argument order.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Parameter("add_n of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![T::zero(); numel(&shape)];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::dim("add_n", &shape, self.shape(x)));
            }
            out.iter_mut()
                .zip(self.value(x))
                .for_each(|(o, &v)| *o += v);
        }
        let tracked = self.tracked_any(xs);
        Ok(self.push(shape, out, Op::AddN(xs.to_vec()), tracked))
    }

    /// Columns `start..end` of a 2-D node.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, end]));
        }
        let w = end - start;
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(vec![m, w], out, Op::SliceCols { x, start }, tracked))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let (m, _) = self.dims2(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims2(x, "concat_cols")?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(xs[0]), self.shape(x)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[i * w..(i + 1) * w]);
            }
        }
        let tracked = self.tracked_any(xs);
        Ok(self.push(vec![m, n], out, Op::ConcatCols(xs.to_vec()), tracked))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let (_, n) = self.dims2(xs[0], "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (r, c) = self.dims2(x, "concat_rows")?;
            if c != n {
                return Err(Error::dim("concat_rows", self.shape(xs[0]), self.shape(x)));
            }
            rows += r;
            out.extend_from_slice(self.value(x));
        }
        let tracked = self.tracked_any(xs);
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(xs.to_vec()), tracked))
    }

    /// Row `index` of a 2-D node, as a `1 × n` matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "row")?;
        if index >= m {
            return Err(Error::Index {
                what: "row",
                index,
                bound: m,
            });
        }
        let out = self.value(x)[index * n..(index + 1) * n].to_vec();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(vec![1, n], out, Op::Row { x, index }, tracked))
    }

    /// Back-propagates from a scalar `loss` through every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let n_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if tracked(*a) {
                    // dA = dC · Bᵀ
                    let ga = zeroed(&mut grads[a.0], m * k);
                    gemm_nt(g, self.value(*b), ga, m, n, k);
                }
                if tracked(*b) {
                    // dB = Aᵀ · dC
                    let gb = zeroed(&mut grads[b.0], k * n);
                    gemm_tn(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if tracked(*a) {
                    // dA = dC · B
                    let ga = zeroed(&mut grads[a.0], m * k);
                    gemm_nn(g, self.value(*b), ga, m, n, k);
                }
                if tracked(*b) {
                    // dB = dCᵀ · A
                    let gb = zeroed(&mut grads[b.0], n * k);
                    gemm_tn(g, self.value(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if tracked(v) {
                        let gv = zeroed(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if tracked(*x) {
                    let gx = zeroed(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                }
                if tracked(*bias) {
                    let n = n_of(*bias);
                    let gb = zeroed(&mut grads[bias.0], n);
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let bv = self.value(*b);
                    let ga = zeroed(&mut grads[a.0], g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if tracked(*b) {
                    let av = self.value(*a);
                    let gb = zeroed(&mut grads[b.0], g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(x, factor) => {
                if tracked(*x) {
                    let gx = zeroed(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(o, &d)| *o += d * *factor);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if tracked(*x) {
                    let y = &node.value;
                    let gx = zeroed(&mut grads[x.0], g.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let mut dot = T::zero();
                            for j in 0..*len {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..*len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = n_of(*gamma);
                let nf = T::of(n as f64);
                if tracked(*x) {
                    let gam = self.value(*gamma);
                    let gx = zeroed(&mut grads[x.0], g.len());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            gx[r * n + j] += rs * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if tracked(*gamma) {
                    let gg = zeroed(&mut grads[gamma.0], n);
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if tracked(*beta) {
                    let gb = zeroed(&mut grads[beta.0], n);
                    for gr in g.chunks_exact(n) {
                        gb.iter_mut().zip(gr).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::Gelu(x) => {
                if tracked(*x) {
                    let xv = self.value(*x);
                    let gx = zeroed(&mut grads[x.0], g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] * gelu_grad(xv[j]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if tracked(*logits) {
                    let gl = zeroed(&mut grads[logits.0], probs.len());
                    for (j, &p) in probs.iter().enumerate() {
                        let target = if j == *label { T::one() } else { T::zero() };
                        gl[j] += g[0] * (p - target);
                    }
                }
            }
            Op::Sum(x) => {
                if tracked(*x) {
                    let n = n_of(*x);
                    let gx = zeroed(&mut grads[x.0], n);
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::AddN(xs) => {
                for &x in xs {
                    if tracked(x) {
                        let gx = zeroed(&mut grads[x.0], g.len());
                        gx.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if tracked(*x) {
                    let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let w = node.shape[1];
                    let gx = zeroed(&mut grads[x.0], m * n);
                    for i in 0..m {
                        for j in 0..w {
                            gx[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &x in xs {
                    let w = self.shape(x)[1];
                    if tracked(x) {
                        let gx = zeroed(&mut grads[x.0], m * w);
                        for i in 0..m {
                            for j in 0..w {
                                gx[i * w + j] += g[i * n + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = n_of(x);
                    if tracked(x) {
                        let gx = zeroed(&mut grads[x.0], len);
                        gx.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(o, &d)| *o += d);
                    }
                    offset += len;
                }
            }
            Op::Row { x, index } => {
                if tracked(*x) {
                    let n = node.shape[1];
                    let total = n_of(*x);
                    let gx = zeroed(&mut grads[x.0], total);
                    for j in 0..n {
                        gx[index * n + j] += g[j];
                    }
                }
            }
        }
    }
}
