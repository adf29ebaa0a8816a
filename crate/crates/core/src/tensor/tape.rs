use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{col2im_add, gemm, im2col, softmax_rows};
use super::Tensor;
use crate::error::{Error, Result};

/// Additive mask value that removes a logit from a softmax.
pub const NEG_INF_SURROGATE: f64 = -1e30;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn tape_id(&self) -> u64 {
        self.tape
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Concat { parts: Vec<usize>, axis: usize },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Abs(usize),
    Softmax(usize),
    Sum { src: usize, axis: Option<usize> },
    Scale(usize, f64),
    Embedding { table: usize, rows: Vec<usize> },
    SqNorm(usize),
    Conv1d { seq: usize, kernels: usize, bias: usize },
    SliceCols { src: usize, start: usize },
    Reshape(usize),
    LogFloor(usize, f64),
    SmoothL1(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records primitive operations for one forward pass and replays them in
/// reverse in [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so every node's parents precede it.
/// A tape is single-threaded; build one per sample to run samples in parallel.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Rows × last-axis view used by row-wise operations.
fn rows_last(t: &Tensor) -> (usize, usize) {
    let last = *t.shape().last().unwrap();
    (t.len() / last, last)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, idx: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        idx.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        let idx = self.check(v).expect("var from another tape");
        self.nodes.borrow()[idx].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        let idx = self.check(v).expect("var from another tape");
        self.nodes.borrow()[idx].value.shape().to_vec()
    }

    /// Single element of a one-element value.
    pub fn item(&self, v: Var) -> f64 {
        let idx = self.check(v).expect("var from another tape");
        self.nodes.borrow()[idx].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        let idx = self.check(v).expect("var from another tape");
        self.nodes.borrow()[idx].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if it flowed there.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let idx = self.check(v).ok()?;
        let nodes = self.nodes.borrow();
        let node = &nodes[idx];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap())
    }

    /// Apply `f` to the input values and record the result.
    fn unary(
        &self,
        a: Var,
        op_name: &'static str,
        f: impl FnOnce(&Tensor) -> Result<Tensor>,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let ia = self.check(a)?;
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[ia].value)
        }
        .map_err(|e| match e {
            Error::ShapeMismatch { detail, .. } => Error::shape(op_name, detail),
            e => e,
        })?;
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(out, op(ia), rg))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[ia].value, &nodes[ib].value)?
        };
        let rg = self.needs_grad(&[ia, ib]);
        Ok(self.push(out, op(ia, ib), rg))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        self.unary(
            a,
            "map",
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()),
            op,
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                let (m, k) = dims2(x, "matmul")?;
                let (k2, n) = dims2(y, "matmul")?;
                if k != k2 {
                    return Err(Error::shape("matmul", format!("{m}×{k} · {k2}×{n}")));
                }
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, x.data(), false, y.data(), false, &mut out, false);
                Tensor::new(vec![m, n], out)
            },
            Op::MatMul,
        )
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.unary(
            a,
            "transpose",
            |x| {
                let (r, c) = dims2(x, "transpose")?;
                let d = x.data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = d[i * c + j];
                    }
                }
                Tensor::new(vec![c, r], out)
            },
            Op::Transpose,
        )
    }

    fn same_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
        if x.shape() != y.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                Self::same_shape("add", x, y)?;
                Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect(),
                )
            },
            Op::Add,
        )
    }

    /// `a (r×c) + b`, with `b` of shape `r×1` (or `[r]`) repeated along the trailing axis.
    pub fn add_bias(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                let (r, c) = dims2(x, "add_bias")?;
                let ok = matches!(y.shape(), [n] if *n == r) || matches!(y.shape(), [n, 1] if *n == r);
                if !ok {
                    return Err(Error::shape(
                        "add_bias",
                        format!("bias {:?} does not broadcast over {r}×{c}", y.shape()),
                    ));
                }
                let mut out = x.data().to_vec();
                for i in 0..r {
                    let bi = y.data()[i];
                    out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v += bi);
                }
                Tensor::new(vec![r, c], out)
            },
            Op::AddBias,
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                Self::same_shape("sub", x, y)?;
                Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect(),
                )
            },
            Op::Sub,
        )
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                Self::same_shape("hadamard", x, y)?;
                Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
                )
            },
            Op::Mul,
        )
    }

    /// Concatenate along axis 0 (stack rows) or axis 1 (stack columns).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyAxis { op: "concat" });
        }
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let out = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = idx.iter().map(|&i| &nodes[i].value).collect();
            concat_values(&vals, axis)?
        };
        let rg = self.needs_grad(&idx);
        Ok(self.push(out, Op::Concat { parts: idx, axis }, rg))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.map(a, |v| v.max(0.0), Op::Relu)
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.map(a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.map(a, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.map(a, f64::abs, Op::Abs)
    }

    /// `ln(max(a, floor))` elementwise; the gradient is zero where the floor is active.
    pub fn log_floor(&self, a: Var, floor: f64) -> Result<Var> {
        self.map(a, move |v| v.max(floor).ln(), move |i| Op::LogFloor(i, floor))
    }

    /// Huber-style smooth L1: `0.5 x²` for `|x| < 1`, else `|x| − 0.5`.
    pub fn smooth_l1(&self, a: Var) -> Result<Var> {
        self.map(
            a,
            |x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 },
            Op::SmoothL1,
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        self.map(a, move |v| v * s, move |i| Op::Scale(i, s))
    }

    /// Softmax over the last axis of every row.
    ///
    /// `mask`, when given, has the logits' shape and is added before normalizing;
    /// entries must be `0` or at most [`NEG_INF_SURROGATE`].
    pub fn softmax(&self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        self.unary(
            a,
            "softmax",
            |x| {
                let mut logits = x.data().to_vec();
                if let Some(m) = mask {
                    Self::same_shape("softmax mask", x, m)?;
                    if let Some(bad) = m.data().iter().find(|&&v| v != 0.0 && v > NEG_INF_SURROGATE) {
                        return Err(Error::InvalidArgument(format!(
                            "softmax mask entries must be 0 or masked, found {bad}"
                        )));
                    }
                    logits.iter_mut().zip(m.data()).for_each(|(l, mv)| *l += mv);
                }
                let (rows, cols) = rows_last(x);
                Tensor::new(x.shape().to_vec(), softmax_rows(&logits, rows, cols))
            },
            Op::Softmax,
        )
    }

    /// Sum over one axis (kept as size 1) or over everything when `axis` is `None`.
    pub fn sum(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.unary(a, "sum", |x| reduce_sum(x, axis), |i| Op::Sum { src: i, axis })
    }

    pub fn mean(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        let count = {
            let idx = self.check(a)?;
            let nodes = self.nodes.borrow();
            let x = &nodes[idx].value;
            match axis {
                None => x.len(),
                Some(ax) => *x
                    .shape()
                    .get(ax)
                    .ok_or_else(|| Error::shape("mean", format!("axis {ax} on {:?}", x.shape())))?,
            }
        };
        let s = self.sum(a, axis)?;
        self.scale(s, 1.0 / count as f64)
    }

    /// Rows `indices` of `table` (`V×dim`), giving `len(indices)×dim`.
    pub fn embedding(&self, table: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::EmptyAxis { op: "embedding" });
        }
        let rows = indices.to_vec();
        self.unary(
            table,
            "embedding",
            |t| {
                let (v, dim) = dims2(t, "embedding")?;
                let mut out = Vec::with_capacity(indices.len() * dim);
                for &r in indices {
                    if r >= v {
                        return Err(Error::shape("embedding", format!("row {r} out of {v}")));
                    }
                    out.extend_from_slice(&t.data()[r * dim..(r + 1) * dim]);
                }
                Tensor::new(vec![indices.len(), dim], out)
            },
            move |i| Op::Embedding { table: i, rows },
        )
    }

    /// Squared Frobenius norm, as a one-element tensor.
    pub fn sq_norm(&self, a: Var) -> Result<Var> {
        self.unary(
            a,
            "sq_norm",
            |x| Ok(Tensor::scalar(x.data().iter().map(|v| v * v).sum())),
            Op::SqNorm,
        )
    }

    /// Same-padded temporal convolution: `seq` is `d×T`, `kernels` is
    /// `d_out×d×k`, `bias` has `d_out` entries; the output is `d_out×T`.
    pub fn conv1d_same(&self, seq: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (is, ik, ib) = (self.check(seq)?, self.check(kernels)?, self.check(bias)?);
        let out = {
            let nodes = self.nodes.borrow();
            let (x, w, b) = (&nodes[is].value, &nodes[ik].value, &nodes[ib].value);
            let (d, t) = dims2(x, "conv1d_same")?;
            let [d_out, d_in, k] = w.shape() else {
                return Err(Error::shape("conv1d_same", format!("kernels {:?} are not d_out×d×k", w.shape())));
            };
            let (d_out, d_in, k) = (*d_out, *d_in, *k);
            if k % 2 == 0 {
                return Err(Error::EvenKernel(k));
            }
            if d_in != d || b.len() != d_out {
                return Err(Error::shape(
                    "conv1d_same",
                    format!("seq {d}×{t}, kernels {:?}, bias {:?}", w.shape(), b.shape()),
                ));
            }
            let cols = im2col(x.data(), d, t, k);
            let mut out = vec![0.0; d_out * t];
            for (o, row) in out.chunks_mut(t).enumerate() {
                row.fill(b.data()[o]);
            }
            gemm(d_out, d * k, t, w.data(), false, &cols, false, &mut out, true);
            Tensor::new(vec![d_out, t], out)?
        };
        let rg = self.needs_grad(&[is, ik, ib]);
        Ok(self.push(
            out,
            Op::Conv1d {
                seq: is,
                kernels: ik,
                bias: ib,
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        if len == 0 {
            return Err(Error::EmptyAxis { op: "slice_cols" });
        }
        self.unary(
            a,
            "slice_cols",
            |x| {
                let (r, c) = dims2(x, "slice_cols")?;
                if start + len > c {
                    return Err(Error::shape("slice_cols", format!("{start}+{len} > {c} columns")));
                }
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
                }
                Tensor::new(vec![r, len], out)
            },
            move |i| Op::SliceCols { src: i, start },
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.unary(a, "reshape", |x| x.reshape(shape), Op::Reshape)
    }

    /// Reverse pass from a one-element `loss`. Gradients accumulate over every path.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            if nodes[root].value.len() != 1 {
                return Err(Error::NonScalarLoss(nodes[root].value.shape().to_vec()));
            }
            grads.resize(root + 1, None);
            grads[root] = Some(vec![1.0]);
            for i in (0..=root).rev() {
                if !nodes[i].requires_grad {
                    continue;
                }
                if let Some(g) = grads[i].take() {
                    vjp(&nodes, i, &g, &mut grads);
                    grads[i] = Some(g);
                }
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (node, g) in nodes.iter_mut().zip(grads.into_iter().chain(std::iter::repeat(None))) {
            node.grad = g;
        }
        Ok(())
    }
}

fn concat_values(vals: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = vals[0];
    match (first.rank(), axis) {
        (1, 0) => {
            if vals.iter().any(|v| v.rank() != 1) {
                return Err(Error::shape("concat", "mixed ranks"));
            }
            let data: Vec<f64> = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
            Ok(Tensor::vector(data))
        }
        (2, 0) => {
            let c = first.cols();
            if vals.iter().any(|v| v.rank() != 2 || v.cols() != c) {
                return Err(Error::shape("concat", "row stacking needs equal column counts"));
            }
            let rows = vals.iter().map(|v| v.rows()).sum();
            let data: Vec<f64> = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
            Tensor::new(vec![rows, c], data)
        }
        (2, 1) => {
            let r = first.rows();
            if vals.iter().any(|v| v.rank() != 2 || v.rows() != r) {
                return Err(Error::shape("concat", "column stacking needs equal row counts"));
            }
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for v in vals {
                    let c = v.cols();
                    data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::new(vec![r, cols], data)
        }
        (rank, axis) => Err(Error::shape("concat", format!("axis {axis} on rank {rank}"))),
    }
}

fn reduce_sum(x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match (axis, x.shape()) {
        (None, _) | (Some(0), [_]) => Ok(Tensor::scalar(x.data().iter().sum())),
        (Some(0), [r, c]) => {
            let mut out = vec![0.0; *c];
            for i in 0..*r {
                for (o, v) in out.iter_mut().zip(&x.data()[i * c..(i + 1) * c]) {
                    *o += v;
                }
            }
            Tensor::new(vec![1, *c], out)
        }
        (Some(1), [r, c]) => {
            let out = (0..*r).map(|i| x.data()[i * c..(i + 1) * c].iter().sum()).collect();
            Tensor::new(vec![*r, 1], out)
        }
        (Some(ax), s) => Err(Error::shape("sum", format!("axis {ax} on shape {s:?}"))),
    }
}

/// Accumulate into the gradient buffer of `parent` if it needs one.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], parent: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[parent].requires_grad {
        return;
    }
    let n = nodes[parent].value.len();
    let buf = grads[parent].get_or_insert_with(|| vec![0.0; n]);
    f(buf);
}

fn vjp(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = node.value.data();
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].value.rows(), nodes[a].value.cols());
            let n = nodes[b].value.cols();
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            acc(nodes, grads, a, |da| gemm(m, n, k, g, false, bv, true, da, true));
            acc(nodes, grads, b, |db| gemm(k, m, n, av, true, g, false, db, true));
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[a].value.rows(), nodes[a].value.cols());
            acc(nodes, grads, a, |da| {
                for ii in 0..r {
                    for j in 0..c {
                        da[ii * c + j] += g[j * r + ii];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(nodes, grads, a, |da| add_into(da, g));
            acc(nodes, grads, b, |db| add_into(db, g));
        }
        Op::AddBias(a, b) => {
            acc(nodes, grads, a, |da| add_into(da, g));
            let c = node.value.cols();
            acc(nodes, grads, b, |db| {
                for (r, d) in db.iter_mut().enumerate() {
                    *d += g[r * c..(r + 1) * c].iter().sum::<f64>();
                }
            });
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, a, |da| add_into(da, g));
            acc(nodes, grads, b, |db| db.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            acc(nodes, grads, a, |da| {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * y;
                }
            });
            acc(nodes, grads, b, |db| {
                for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * x;
                }
            });
        }
        Op::Concat { ref parts, axis } => {
            if axis == 0 {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    acc(nodes, grads, p, |dp| add_into(dp, &g[off..off + n]));
                    off += n;
                }
            } else {
                let (r, total) = (node.value.rows(), node.value.cols());
                let mut col_off = 0;
                for &p in parts {
                    let c = nodes[p].value.cols();
                    acc(nodes, grads, p, |dp| {
                        for ii in 0..r {
                            add_into(
                                &mut dp[ii * c..(ii + 1) * c],
                                &g[ii * total + col_off..ii * total + col_off + c],
                            );
                        }
                    });
                    col_off += c;
                }
            }
        }
        Op::Relu(a) => {
            let x = nodes[a].value.data();
            acc(nodes, grads, a, |da| {
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            });
        }
        Op::Tanh(a) => acc(nodes, grads, a, |da| {
            for ((d, gi), y) in da.iter_mut().zip(g).zip(out) {
                *d += gi * (1.0 - y * y);
            }
        }),
        Op::Sigmoid(a) => acc(nodes, grads, a, |da| {
            for ((d, gi), y) in da.iter_mut().zip(g).zip(out) {
                *d += gi * y * (1.0 - y);
            }
        }),
        Op::Abs(a) => {
            let x = nodes[a].value.data();
            acc(nodes, grads, a, |da| {
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    *d += gi * if *xi > 0.0 { 1.0 } else if *xi < 0.0 { -1.0 } else { 0.0 };
                }
            });
        }
        Op::LogFloor(a, floor) => {
            let x = nodes[a].value.data();
            acc(nodes, grads, a, |da| {
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    if *xi > floor {
                        *d += gi / xi;
                    }
                }
            });
        }
        Op::SmoothL1(a) => {
            let x = nodes[a].value.data();
            acc(nodes, grads, a, |da| {
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    let slope = if xi.abs() < 1.0 { *xi } else { xi.signum() };
                    *d += gi * slope;
                }
            });
        }
        Op::Scale(a, s) => acc(nodes, grads, a, |da| {
            da.iter_mut().zip(g).for_each(|(d, gi)| *d += s * gi)
        }),
        Op::Softmax(a) => {
            let (rows, cols) = rows_last(&node.value);
            acc(nodes, grads, a, |da| {
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..cols {
                        da[r * cols + j] += y[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::Sum { src, axis } => {
            let shape = nodes[src].value.shape().to_vec();
            acc(nodes, grads, src, |ds| match (axis, shape.as_slice()) {
                (Some(0), [_, c]) => {
                    for (k, d) in ds.iter_mut().enumerate() {
                        *d += g[k % c];
                    }
                }
                (Some(1), [_, c]) => {
                    for (k, d) in ds.iter_mut().enumerate() {
                        *d += g[k / c];
                    }
                }
                _ => ds.iter_mut().for_each(|d| *d += g[0]),
            });
        }
        Op::Embedding { table, ref rows } => {
            let dim = nodes[table].value.cols();
            acc(nodes, grads, table, |dt| {
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut dt[r * dim..(r + 1) * dim], &g[k * dim..(k + 1) * dim]);
                }
            });
        }
        Op::SqNorm(a) => {
            let x = nodes[a].value.data();
            acc(nodes, grads, a, |da| {
                for (d, xi) in da.iter_mut().zip(x) {
                    *d += 2.0 * xi * g[0];
                }
            });
        }
        Op::Conv1d { seq, kernels, bias } => {
            let (d, t) = (nodes[seq].value.rows(), nodes[seq].value.cols());
            let ws = nodes[kernels].value.shape();
            let (d_out, k) = (ws[0], ws[2]);
            let w = nodes[kernels].value.data();
            if nodes[kernels].requires_grad {
                let cols = im2col(nodes[seq].value.data(), d, t, k);
                acc(nodes, grads, kernels, |dw| gemm(d_out, t, d * k, g, false, &cols, true, dw, true));
            }
            acc(nodes, grads, bias, |db| {
                for (o, dbo) in db.iter_mut().enumerate() {
                    *dbo += g[o * t..(o + 1) * t].iter().sum::<f64>();
                }
            });
            acc(nodes, grads, seq, |dx| {
                let mut dcols = vec![0.0; d * k * t];
                gemm(d * k, d_out, t, w, true, g, false, &mut dcols, false);
                col2im_add(&dcols, d, t, k, dx);
            });
        }
        Op::SliceCols { src, start } => {
            let (r, c) = (nodes[src].value.rows(), nodes[src].value.cols());
            let len = node.value.cols();
            acc(nodes, grads, src, |ds| {
                for ii in 0..r {
                    add_into(&mut ds[ii * c + start..ii * c + start + len], &g[ii * len..(ii + 1) * len]);
                }
            });
        }
        Op::Reshape(a) => acc(nodes, grads, a, |da| add_into(da, g)),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
