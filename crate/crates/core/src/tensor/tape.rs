//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs, so node order is a topological order. `backward` walks the
//! list once in reverse.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::shape::{
    broadcast_shape, broadcast_strides, check_axis, for_each_offset2, numel, strides,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a trainable parameter in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Exp,
    Sqrt,
    Abs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Shift(Var),
    Sum(Var),
    Softmax { input: Var, axis: usize },
    MatMul(Var, Var),
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    IndexSelect { table: Var, ids: Vec<usize> },
    Unfold { input: Var, kernel: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of operations. Single owner; drive it from one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf that required grad; `None` if it had no path to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Smallest `|x|` fed to a relu or abs node: how far the recorded point
    /// is from the nearest kink. `None` if the tape has no such node.
    pub fn kink_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary(Unary::Relu | Unary::Abs, a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|v| v.abs()))
            .reduce(f64::min)
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.requires_grad = needs_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf { param: None }, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Records a trainable parameter leaf tagged with its store id.
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("parameter tensors are well formed");
        self.push(value, Op::Leaf { param: Some(id) }, true)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let mut out = vec![0.0; numel(&out_shape)];
            let (da, db) = (ta.data(), tb.data());
            for_each_offset2(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(kind, a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let t = self.value(a);
        let f = |x: f64| match kind {
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
        };
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Unary(kind, a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    /// Absolute value; the backward rule uses subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * s).collect())
            .expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, s), needs)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x + s).collect())
            .expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Shift(a), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scalar_mul(a, -1.0)
    }

    /// Sum over `axes`. With `keepdim` the reduced axes stay as extent 1.
    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let mut seen = vec![false; in_shape.len()];
        for &ax in axes {
            check_axis(ax, &in_shape)?;
            if std::mem::replace(&mut seen[ax], true) {
                return Err(Error::dim(format!("axis {ax} repeated in {axes:?}")));
            }
        }
        let kept: Vec<usize> = in_shape
            .iter()
            .zip(&seen)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let st = broadcast_strides(&kept, &in_shape);
        let mut out = vec![0.0; numel(&kept)];
        let x = self.value(a).data();
        for_each_offset2(&in_shape, &st, &st, |i, o, _| out[o] += x[i]);
        let needs = self.needs(a);
        let summed = self.push(Tensor::new(kept, out)?, Op::Sum(a), needs);
        if keepdim {
            Ok(summed)
        } else {
            let squeezed: Vec<usize> = in_shape
                .iter()
                .zip(&seen)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect();
            self.reshape(summed, squeezed)
        }
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(a);
        let mut count = 1usize;
        for &ax in axes {
            check_axis(ax, shape)?;
            count *= shape[ax];
        }
        let s = self.sum(a, axes, keepdim)?;
        Ok(self.scalar_mul(s, 1.0 / count as f64))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes, false).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scalar_mul(s, 1.0 / n as f64)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(axis, &shape)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    y[at(j)] /= z;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, y)?, Op::Softmax { input: a, axis }, needs))
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mm = MatMulDims::new(&sa, &sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; numel(&mm.batch) * mm.m * mm.n];
        let (m, k, n) = (mm.m, mm.k, mm.n);
        for_each_offset2(&mm.batch, &mm.stride_a, &mm.stride_b, |bi, ia, ib| {
            gemm_nn(
                &da[ia * m * k..(ia + 1) * m * k],
                &db[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        });
        let mut shape = mm.batch.clone();
        shape.extend([m, n]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Axis permutation; output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..in_shape.len()).collect::<Vec<_>>() {
            return Err(Error::dim(format!(
                "{perm:?} is not a permutation of the axes of {in_shape:?}"
            )));
        }
        let (out_shape, st) = permuted(&in_shape, perm);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for_each_offset2(&out_shape, &st, &st, |o, i, _| out[o] = x[i]);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                input: a,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Rows of `table` (axis 0) selected by `ids`.
    pub fn index_select(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.is_empty() || ids.is_empty() {
            return Err(Error::dim("index_select needs a table of rank >= 1 and ids"));
        }
        let rows = shape[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("row {bad} out of range for {rows} rows")));
        }
        let width: usize = shape[1..].iter().product();
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&t[i * width..(i + 1) * width]);
        }
        let mut out_shape = vec![ids.len()];
        out_shape.extend_from_slice(&shape[1..]);
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::IndexSelect {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Zero-padded sliding windows over time: `[b, t, c]` → `[b, t, c·kernel]`,
    /// feature `c·kernel + j` holding `x[b, t + j − kernel/2, c]`.
    pub fn unfold_same(&mut self, a: Var, kernel: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim(format!(
                "unfold expects [batch, time, channels], got {shape:?}"
            )));
        }
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {kernel} must be odd")));
        }
        let (bsz, t, c) = (shape[0], shape[1], shape[2]);
        let half = kernel / 2;
        let x = self.value(a).data();
        let mut out = vec![0.0; bsz * t * c * kernel];
        for b in 0..bsz {
            for ti in 0..t {
                let row = &mut out[(b * t + ti) * c * kernel..(b * t + ti + 1) * c * kernel];
                for j in 0..kernel {
                    let src = ti + j;
                    if src < half || src - half >= t {
                        continue;
                    }
                    let xs = &x[(b * t + src - half) * c..(b * t + src - half + 1) * c];
                    for (ci, &v) in xs.iter().enumerate() {
                        row[ci * kernel + j] = v;
                    }
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new([bsz, t, c * kernel], out)?,
            Op::Unfold { input: a, kernel },
            needs,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        // only leaves keep their gradients
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf { .. }) || !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Parameter leaves with their gradients from `grads`.
    pub fn param_grads<'a>(
        &'a self,
        grads: &'a Gradients,
    ) -> impl Iterator<Item = (ParamId, &'a [f64])> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Leaf { param: Some(id) } => grads.get(Var(i)).map(|g| (id, g)),
            _ => None,
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                let (na, nb) = (self.needs(a), self.needs(b));
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                let out_shape = node.value.shape();
                let sa = broadcast_strides(ta.shape(), out_shape);
                let sb = broadcast_strides(tb.shape(), out_shape);
                let (xa, xb) = (ta.data(), tb.data());
                for_each_offset2(out_shape, &sa, &sb, |o, ia, ib| {
                    let go = g[o];
                    let (da, db) = match kind {
                        Binary::Add => (go, go),
                        Binary::Sub => (go, -go),
                        Binary::Mul => (go * xb[ib], go * xa[ia]),
                        Binary::Div => (go / xb[ib], -go * xa[ia] / (xb[ib] * xb[ib])),
                    };
                    ga[ia] += da;
                    gb[ib] += db;
                });
                if na {
                    accumulate(grads, a, ga);
                }
                if nb {
                    accumulate(grads, b, gb);
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let gi: Vec<f64> = match kind {
                    Unary::Relu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    Unary::Exp => y.iter().zip(g).map(|(&y, &g)| g * y).collect(),
                    Unary::Sqrt => y.iter().zip(g).map(|(&y, &g)| g / (2.0 * y)).collect(),
                    Unary::Abs => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                };
                accumulate(grads, *a, gi);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.iter().map(|&v| v * s).collect()),
            Op::Shift(a) | Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::Sum(a) => {
                let in_shape = self.shape(*a);
                let st = broadcast_strides(node.value.shape(), in_shape);
                let mut gi = vec![0.0; numel(in_shape)];
                for_each_offset2(in_shape, &st, &st, |i, o, _| gi[i] = g[o]);
                accumulate(grads, *a, gi);
            }
            Op::Softmax { input, axis } => {
                let shape = node.value.shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let y = node.value.data();
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gi[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *input, gi);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                let mm = MatMulDims::new(ta.shape(), tb.shape()).expect("validated in forward");
                let (m, k, n) = (mm.m, mm.k, mm.n);
                let (xa, xb) = (ta.data(), tb.data());
                let (na, nb) = (self.needs(a), self.needs(b));
                let mut ga = vec![0.0; if na { xa.len() } else { 0 }];
                let mut gb = vec![0.0; if nb { xb.len() } else { 0 }];
                for_each_offset2(&mm.batch, &mm.stride_a, &mm.stride_b, |bi, ia, ib| {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    if na {
                        gemm_nt(
                            gc,
                            &xb[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    if nb {
                        gemm_tn(
                            &xa[ia * m * k..(ia + 1) * m * k],
                            gc,
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
                if na {
                    accumulate(grads, a, ga);
                }
                if nb {
                    accumulate(grads, b, gb);
                }
            }
            Op::Permute { input, perm } => {
                let in_shape = self.shape(*input);
                let (out_shape, st) = permuted(in_shape, perm);
                let mut gi = vec![0.0; g.len()];
                for_each_offset2(&out_shape, &st, &st, |o, i, _| gi[i] = g[o]);
                accumulate(grads, *input, gi);
            }
            Op::IndexSelect { table, ids } => {
                let tshape = self.shape(*table);
                let width: usize = tshape[1..].iter().product();
                let mut gi = vec![0.0; numel(tshape)];
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut gi[i * width..(i + 1) * width];
                    for (d, s) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *d += s;
                    }
                }
                accumulate(grads, *table, gi);
            }
            Op::Unfold { input, kernel } => {
                let shape = self.shape(*input);
                let (bsz, t, c) = (shape[0], shape[1], shape[2]);
                let kernel = *kernel;
                let half = kernel / 2;
                let mut gi = vec![0.0; bsz * t * c];
                for b in 0..bsz {
                    for ti in 0..t {
                        let row = &g[(b * t + ti) * c * kernel..(b * t + ti + 1) * c * kernel];
                        for j in 0..kernel {
                            let src = ti + j;
                            if src < half || src - half >= t {
                                continue;
                            }
                            let dst = &mut gi[(b * t + src - half) * c..(b * t + src - half + 1) * c];
                            for (ci, d) in dst.iter_mut().enumerate() {
                                *d += row[ci * kernel + j];
                            }
                        }
                    }
                }
                accumulate(grads, *input, gi);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
        slot @ None => *slot = Some(g),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output shape of a permutation and the input strides seen from output order.
fn permuted(in_shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let st = strides(in_shape);
    (
        perm.iter().map(|&p| in_shape[p]).collect(),
        perm.iter().map(|&p| st[p]).collect(),
    )
}

struct MatMulDims {
    batch: Vec<usize>,
    // strides in whole-matrix units
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

impl MatMulDims {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!(
                "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (k2, n) = (sb[rb - 2], sb[rb - 1]);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {sa:?} x {sb:?}"
            )));
        }
        let batch = broadcast_shape(&sa[..ra - 2], &sb[..rb - 2])
            .map_err(|_| Error::dim(format!("matmul batch axes of {sa:?} x {sb:?} do not broadcast")))?;
        Ok(MatMulDims {
            stride_a: broadcast_strides(&sa[..ra - 2], &batch),
            stride_b: broadcast_strides(&sb[..rb - 2], &batch),
            batch,
            m,
            k,
            n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = numel(shape);
        t(shape, &(0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[3.0, -1.0, 0.5, 7.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, -1.0, 0.5, 7.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 1]);
        assert_eq!(tape.value(p).data(), &[11.0]);

        let bad = tape.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        let err = tape.matmul(a, bad).unwrap_err().to_string();
        assert!(err.contains("[1, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng).with_requires_grad(true);
        let b = random(&[4, 2], &mut rng);
        let mut tape = Tape::new();
        let va = tape.leaf(a);
        let vb = tape.constant(b.clone());
        let p = tape.matmul(va, vb).unwrap();
        let l = tape.sum_all(p);
        let g = tape.backward(l).unwrap();
        // row sums of B broadcast over rows of A
        for i in 0..3 {
            for kk in 0..4 {
                let want: f64 = (0..2).map(|j| b.at(&[kk, j])).sum();
                assert!((g.get(va).unwrap()[i * 4 + kk] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let a = tape.abs(x);
        assert_eq!(tape.value(a).data(), &[1.0, 0.0, 2.0]);
        let y = tape.constant(Tensor::from_vec(vec![-3.0, 5.0]));
        let r = tape.relu(y);
        assert_eq!(tape.value(r).data(), &[0.0, 5.0]);
        let p = tape.constant(t(&[2, 3], &[1.0; 6]));
        let q = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.add(p, q), Err(Error::Dimension(_))));
    }

    #[test]
    fn abs_subgradient_is_zero_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]).with_requires_grad(true));
        let a = tape.abs(x);
        let l = tape.sum_all(a);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn exp_derivative_at_one_is_e() {
        let x = Tensor::from_vec(vec![1.0]);
        let r = check(&[x], |tape, v| Ok(tape.exp(v[0])));
        assert!((r.analytic[0] - std::f64::consts::E).abs() < 1e-12);
        assert!((r.numeric[0] - std::f64::consts::E).abs() < 1e-6);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_requires_grad(true));
        let m = tape.mean_all(x);
        assert_eq!(tape.value(m).data(), &[2.0]);
        let g = tape.backward(m).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let y = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(y, &[0], false).unwrap();
        assert_eq!(tape.value(s).shape(), &[2]);
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        let s = tape.sum(y, &[1], true).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 1]);
        assert_eq!(tape.value(s).data(), &[3.0, 7.0]);
        assert!(tape.sum(y, &[2], false).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let x = tape.constant(Tensor::from_vec(vec![1000.0, 1000.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_requires_grad(true));
        let l = tape.sum_all(x);
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum_all(sq);
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap(), &[2.0, 4.0]);

        assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn permute_and_unfold_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.transpose(x).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);

        let s = tape.constant(t(&[1, 3, 1], &[1.0, 2.0, 3.0]));
        let u = tape.unfold_same(s, 3).unwrap();
        assert_eq!(
            tape.value(u).data(),
            &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]
        );
    }

    // finite-difference checks over every differentiable op
    #[test]
    fn op_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Tape, &[Var]) -> Result<Var>);
        let cases: Vec<Case> = vec![
            ("add_broadcast", vec![vec![2, 3, 4], vec![4]], |t, v| t.add(v[0], v[1])),
            ("sub_broadcast", vec![vec![2, 1, 4], vec![2, 3, 4]], |t, v| t.sub(v[0], v[1])),
            ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
            ("mul_col", vec![vec![3, 4], vec![3, 1]], |t, v| t.mul(v[0], v[1])),
            ("div", vec![vec![3, 4], vec![3, 4]], |t, v| {
                let d = t.exp(v[1]);
                t.div(v[0], d)
            }),
            ("scalar_mul", vec![vec![5]], |t, v| Ok(t.scalar_mul(v[0], -1.7))),
            ("relu", vec![vec![6]], |t, v| Ok(t.relu(v[0]))),
            ("exp", vec![vec![6]], |t, v| Ok(t.exp(v[0]))),
            ("sqrt", vec![vec![6]], |t, v| {
                let e = t.exp(v[0]);
                Ok(t.sqrt(e))
            }),
            ("abs", vec![vec![6]], |t, v| Ok(t.abs(v[0]))),
            ("sum_axes", vec![vec![2, 3, 4]], |t, v| t.sum(v[0], &[0, 2], false)),
            ("mean_keep", vec![vec![2, 3, 4]], |t, v| t.mean(v[0], &[1], true)),
            ("softmax_last", vec![vec![3, 5]], |t, v| t.softmax(v[0], 1)),
            ("softmax_mid", vec![vec![2, 4, 3]], |t, v| t.softmax(v[0], 1)),
            ("matmul_2d", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
            ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 5]], |t, v| t.matmul(v[0], v[1])),
            ("matmul_bcast", vec![vec![2, 3, 4], vec![4, 5]], |t, v| t.matmul(v[0], v[1])),
            ("permute", vec![vec![2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
            ("index_select", vec![vec![4, 3]], |t, v| t.index_select(v[0], &[3, 1, 3])),
            ("unfold", vec![vec![2, 5, 3]], |t, v| t.unfold_same(v[0], 3)),
        ];
        for (name, shapes, f) in cases {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let report = check(&inputs, f);
            let err = max_relative_error(&report);
            assert!(err < 1e-4, "{name}: max relative error {err:e}");
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[4, 7], &mut rng));
        let s = tape.softmax(x, 1).unwrap();
        for row in tape.value(s).data().chunks(7) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reused_graph_doubles_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.3, -1.2]).with_requires_grad(true));
        let e = tape.exp(x);
        let l = tape.sum_all(e);
        let g1 = tape.backward(l).unwrap().get(x).unwrap().to_vec();
        let mut slot = Tensor::from_vec(vec![0.3, -1.2]);
        slot.accumulate_grad(&g1).unwrap();
        slot.accumulate_grad(tape.backward(l).unwrap().get(x).unwrap())
            .unwrap();
        for (a, b) in slot.grad().unwrap().iter().zip(&g1) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn ops_are_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut tape = Tape::new();
            let a = tape.leaf(random(&[2, 3, 4], &mut rng).with_requires_grad(true));
            let b = tape.constant(random(&[4, 4], &mut rng));
            let p = tape.matmul(a, b).unwrap();
            let s = tape.softmax(p, 2).unwrap();
            let l = tape.sum_all(s);
            let l = tape.mul(l, l).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(s).clone(), g.get(a).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }
}
