//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its value and the
//! recipe for its vector-Jacobian product. [`Tape::backward`] walks the nodes
//! in reverse creation order, which is a valid topological order because
//! inputs always precede outputs.
//!
//! GELU is the exact Gaussian-CDF form `x * Phi(x)`; there is no tanh
//! approximation anywhere in the crate.

use std::cell::RefCell;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::rc::Rc;

use super::index::{self, ZERO};
use super::parallel;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    MatMul(Var, Var),
    Gather {
        src: Var,
        map: Rc<Vec<usize>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SumAxis {
        src: Var,
        axis: usize,
    },
    SumAll(Var),
    Gelu(Var),
    Silu(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            tracked: requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    /// The single element of a one-element node.
    pub fn item(&self, v: Var) -> Result<T> {
        let value = self.value(v);
        if value.numel() != 1 {
            return Err(Error::dim(
                "item",
                format!("expected one element, shape is {:?}", value.shape()),
            ));
        }
        Ok(value.data()[0])
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].tracked)
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.check_finite(name)?;
        let tracked = self.tracked(inputs);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: if tracked { op } else { Op::Leaf },
            tracked,
        });
        Ok(Var(nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    fn broadcast_binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            return va.zip_map(&vb, f);
        }
        let out_shape = index::broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            Error::dim(
                name,
                format!("shapes {:?} and {:?} do not broadcast", va.shape(), vb.shape()),
            )
        })?;
        let (da, db) = (va.data(), vb.data());
        let mut data = Vec::with_capacity(out_shape.iter().product());
        index::for_each_run2(
            &out_shape,
            &index::broadcast_strides(va.shape(), &out_shape),
            &index::broadcast_strides(vb.shape(), &out_shape),
            |_, i, j, n, si, sj| match (si, sj) {
                (1, 1) => data.extend(da[i..i + n].iter().zip(&db[j..j + n]).map(|(&x, &y)| f(x, y))),
                (1, 0) => data.extend(da[i..i + n].iter().map(|&x| f(x, db[j]))),
                (0, 1) => data.extend(db[j..j + n].iter().map(|&y| f(da[i], y))),
                _ => data.extend((0..n).map(|k| f(da[i + k * si], db[j + k * sj]))),
            },
        );
        Tensor::from_vec(&out_shape, data)
    }

    /// Broadcasting `a + b`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Broadcasting `a - b`.
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Broadcasting `a * b`.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `scale * x + shift` with scalar coefficients.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, c) = (T::of(scale), T::of(shift));
        let out = self.value(x).map(|v| s * v + c);
        self.push("affine", out, Op::Affine { x, scale: s }, &[x])
    }

    pub fn scale(&self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn silu(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push("silu", out, Op::Silu(x), &[x])
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push("square", out, Op::Square(x), &[x])
    }

    // ---- contractions ------------------------------------------------------

    /// Batched matrix product `(..., M, K) @ (..., K, P)` with broadcasting
    /// batch dimensions.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let plan = MatMulPlan::new(va.shape(), vb.shape())?;
        let mut out = vec![T::zero(); plan.out_numel()];
        plan.forward(va.data(), vb.data(), &mut out);
        let out = Tensor::from_vec(&plan.out_shape, out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `x @ weight + bias` with `weight` of shape `(in, out)`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- rearrangements ----------------------------------------------------

    /// `out[i] = src[map[i]]` (zero where `map[i] == index::ZERO`).
    pub fn gather(&self, src: Var, out_shape: &[usize], map: Vec<usize>) -> Result<Var> {
        let vs = self.value(src);
        let numel: usize = out_shape.iter().product();
        if map.len() != numel {
            return Err(Error::dim(
                "gather",
                format!("map has {} entries for shape {out_shape:?}", map.len()),
            ));
        }
        let sd = vs.data();
        let mut data = Vec::with_capacity(numel);
        for &m in &map {
            if m == ZERO {
                data.push(T::zero());
            } else if m < sd.len() {
                data.push(sd[m]);
            } else {
                return Err(Error::Index {
                    op: "gather",
                    msg: format!("source index {m} out of {}", sd.len()),
                });
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        self.push("gather", out, Op::Gather { src, map: Rc::new(map) }, &[src])
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = index::permute(&self.shape(x), axes)?;
        self.gather(x, &shape, map)
    }

    /// Swap the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::dim("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (shape, map) = index::narrow(&self.shape(x), axis, start, len)?;
        self.gather(x, &shape, map)
    }

    /// Zero-extend `axis` to `new_len`.
    pub fn pad(&self, x: Var, axis: usize, new_len: usize) -> Result<Var> {
        let (shape, map) = index::pad(&self.shape(x), axis, new_len)?;
        self.gather(x, &shape, map)
    }

    /// Rows of a `(R, F)` table: `(indices.len(), F)`.
    pub fn index_rows(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::dim("index_rows", format!("table shape {shape:?}")));
        }
        let (rows, feat) = (shape[0], shape[1]);
        let mut map = Vec::with_capacity(indices.len() * feat);
        for &r in indices {
            if r >= rows {
                return Err(Error::Index {
                    op: "index_rows",
                    msg: format!("row {r} out of {rows}"),
                });
            }
            map.extend(r * feat..(r + 1) * feat);
        }
        self.gather(table, &[indices.len(), feat], map)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = (*self.value(x)).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("shape {s:?} incompatible with {first:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    // ---- reductions --------------------------------------------------------

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let d = v.data();
        for o in 0..outer {
            for k in 0..n {
                let row = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::from_vec(&out_shape, out)?;
        self.push("sum_axis", out, Op::SumAxis { src: x, axis }, &[x])
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", format!("axis {axis} out of range")))?;
        if n == 0 {
            return Err(Error::dim("mean_axis", "zero-length axis"));
        }
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---- normalization -----------------------------------------------------

    /// Layer normalization over the last axis with optional affine terms of
    /// shape `(D,)`.
    pub fn layer_norm(&self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let v = self.value(x);
        let width = *v.shape().last().unwrap_or(&0);
        if width == 0 {
            return Err(Error::dim("layer_norm", "zero-length normalization axis"));
        }
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [width] {
                return Err(Error::dim(
                    "layer_norm",
                    format!("affine shape {:?}, expected [{width}]", self.shape(p)),
                ));
            }
        }
        let g = gain.map(|g| self.value(g));
        let b = bias.map(|b| self.value(b));
        let rows = v.numel() / width;
        let inv_n = T::of(1.0 / width as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); v.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..width {
                let h = (row[i] - mean) * rs;
                xhat[r * width + i] = h;
                let mut y = h;
                if let Some(g) = &g {
                    y *= g.data()[i];
                }
                if let Some(b) = &b {
                    y += b.data()[i];
                }
                out[r * width + i] = y;
            }
        }
        let out = Tensor::from_vec(v.shape(), out)?;
        let mut inputs = vec![x];
        inputs.extend(gain);
        inputs.extend(bias);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &inputs,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let width = *v.shape().last().unwrap_or(&0);
        if width == 0 {
            return Err(Error::dim("softmax", "zero-length last axis"));
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for y in row.iter_mut() {
                *y = (*y - max).exp();
                total += *y;
            }
            for y in row.iter_mut() {
                *y = *y / total;
            }
        }
        let out = Tensor::from_vec(v.shape(), out)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of the one-element node `loss` with respect to every tracked
    /// node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must have one element, shape {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = Acc {
                nodes: &nodes,
                grads: &mut grads,
            };
            backprop(&node.op, &node.value, &g, &mut acc)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

struct Acc<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Tensor<T>>>,
}

impl<'a, T: Scalar> Acc<'a, T> {
    fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn add(&mut self, v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulate `g` (shaped like the broadcast output), times `other`
    /// broadcast to the same shape when given, into `v`, summing over
    /// broadcast axes.
    fn add_reduced(&mut self, v: Var, g: &Tensor<T>, other: Option<&Tensor<T>>) {
        if !self.wants(v) {
            return;
        }
        let shape = self.value(v).shape();
        if shape == g.shape() && other.is_none_or(|o| o.shape() == g.shape()) {
            let gd = g.data();
            match (&mut self.grads[v.0], other) {
                (Some(existing), None) => existing.data_mut().iter_mut().zip(gd).for_each(|(e, &x)| *e += x),
                (Some(existing), Some(o)) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(gd.iter().zip(o.data()))
                    .for_each(|(e, (&x, &y))| *e += x * y),
                (slot @ None, None) => *slot = Some(g.clone()),
                (slot @ None, Some(o)) => *slot = Some(g.zip_map(o, |x, y| x * y).expect("same shape")),
            }
            return;
        }
        let mut out = Tensor::zeros(shape);
        let od = out.data_mut();
        let gd = g.data();
        let st = index::broadcast_strides(shape, g.shape());
        match other {
            None => index::for_each_run2(g.shape(), &st, &st, |i, o, _, n, so, _| match so {
                1 => od[o..o + n].iter_mut().zip(&gd[i..i + n]).for_each(|(e, &x)| *e += x),
                0 => od[o] += gd[i..i + n].iter().fold(T::zero(), |acc, &x| acc + x),
                _ => (0..n).for_each(|k| od[o + k * so] += gd[i + k]),
            }),
            Some(x) => {
                let xd = x.data();
                let sx = index::broadcast_strides(x.shape(), g.shape());
                index::for_each_run2(g.shape(), &st, &sx, |i, o, j, n, so, sj| match (so, sj) {
                    (1, 1) => od[o..o + n]
                        .iter_mut()
                        .zip(gd[i..i + n].iter().zip(&xd[j..j + n]))
                        .for_each(|(e, (&a, &b))| *e += a * b),
                    (1, 0) => od[o..o + n].iter_mut().zip(&gd[i..i + n]).for_each(|(e, &a)| *e += a * xd[j]),
                    (0, 1) => {
                        od[o] += gd[i..i + n].iter().zip(&xd[j..j + n]).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                    }
                    _ => (0..n).for_each(|k| od[o + k * so] += gd[i + k] * xd[j + k * sj]),
                });
            }
        }
        self.add(v, out);
    }
}

fn backprop<T: Scalar>(op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, acc: &mut Acc<'_, T>) -> Result<()> {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc.add_reduced(*a, g, None);
            acc.add_reduced(*b, g, None);
        }
        Op::Sub(a, b) => {
            acc.add_reduced(*a, g, None);
            let neg = g.map(|x| -x);
            acc.add_reduced(*b, &neg, None);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (acc.value(*a), acc.value(*b));
            acc.add_reduced(*a, g, Some(vb));
            acc.add_reduced(*b, g, Some(va));
        }
        Op::Affine { x, scale } => {
            let s = *scale;
            acc.add(*x, g.map(|v| v * s));
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (acc.value(*a), acc.value(*b));
            let plan = MatMulPlan::new(va.shape(), vb.shape())?;
            if acc.wants(*a) {
                let mut ga = vec![T::zero(); va.numel()];
                plan.grad_a(g.data(), vb.data(), &mut ga);
                acc.add(*a, Tensor::from_vec(va.shape(), ga)?);
            }
            if acc.wants(*b) {
                let mut gb = vec![T::zero(); vb.numel()];
                plan.grad_b(va.data(), g.data(), &mut gb);
                acc.add(*b, Tensor::from_vec(vb.shape(), gb)?);
            }
        }
        Op::Gather { src, map } => {
            let mut gs = Tensor::zeros(acc.value(*src).shape());
            let d = gs.data_mut();
            for (&m, &gi) in map.iter().zip(g.data()) {
                if m != ZERO {
                    d[m] += gi;
                }
            }
            acc.add(*src, gs);
        }
        Op::Concat { parts, axis } => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut start = 0;
            for &p in parts {
                let ps = acc.value(p).shape().to_vec();
                let len = ps[*axis];
                if acc.wants(p) {
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    acc.add(p, Tensor::from_vec(&ps, data)?);
                }
                start += len;
            }
        }
        Op::SumAxis { src, axis } => {
            let ss = acc.value(*src).shape().to_vec();
            let outer: usize = ss[..*axis].iter().product();
            let n = ss[*axis];
            let inner: usize = ss[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    data.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            acc.add(*src, Tensor::from_vec(&ss, data)?);
        }
        Op::SumAll(x) => {
            let gv = g.data()[0];
            acc.add(*x, Tensor::full(acc.value(*x).shape(), gv));
        }
        Op::Gelu(x) => {
            let gx = acc.value(*x).zip_map(g, |v, gi| gi * gelu_grad(v))?;
            acc.add(*x, gx);
        }
        Op::Silu(x) => {
            let gx = acc.value(*x).zip_map(g, |v, gi| {
                let s = sigmoid(v);
                gi * s * (T::one() + v * (T::one() - s))
            })?;
            acc.add(*x, gx);
        }
        Op::Square(x) => {
            let gx = acc.value(*x).zip_map(g, |v, gi| T::of(2.0) * v * gi)?;
            acc.add(*x, gx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let width = *g.shape().last().unwrap();
            let rows = g.numel() / width;
            let gd = g.data();
            if let Some(b) = bias {
                let mut gb = vec![T::zero(); width];
                for r in 0..rows {
                    for i in 0..width {
                        gb[i] += gd[r * width + i];
                    }
                }
                acc.add(*b, Tensor::from_vec(&[width], gb)?);
            }
            let gain_v = gain.map(|g| acc.value(g));
            if let Some(gn) = gain {
                let mut gg = vec![T::zero(); width];
                for r in 0..rows {
                    for i in 0..width {
                        gg[i] += gd[r * width + i] * xhat[r * width + i];
                    }
                }
                acc.add(*gn, Tensor::from_vec(&[width], gg)?);
            }
            if acc.wants(*x) {
                let inv_n = T::of(1.0 / width as f64);
                let mut gx = vec![T::zero(); g.numel()];
                let mut dxhat = vec![T::zero(); width];
                for r in 0..rows {
                    let base = r * width;
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for i in 0..width {
                        let gi = gd[base + i];
                        dxhat[i] = match &gain_v {
                            Some(gv) => gi * gv.data()[i],
                            None => gi,
                        };
                        mean_d += dxhat[i];
                        mean_dx += dxhat[i] * xhat[base + i];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    for i in 0..width {
                        gx[base + i] = rstd[r] * (dxhat[i] - mean_d - xhat[base + i] * mean_dx);
                    }
                }
                acc.add(*x, Tensor::from_vec(g.shape(), gx)?);
            }
        }
        Op::Softmax(x) => {
            let width = *out.shape().last().unwrap();
            let mut gx = vec![T::zero(); out.numel()];
            for ((y, gi), dst) in out
                .data()
                .chunks(width)
                .zip(g.data().chunks(width))
                .zip(gx.chunks_mut(width))
            {
                let dot: T = y.iter().zip(gi).map(|(&a, &b)| a * b).sum();
                for i in 0..width {
                    dst[i] = y[i] * (gi[i] - dot);
                }
            }
            acc.add(*x, Tensor::from_vec(out.shape(), gx)?);
        }
        Op::Reshape(x) => {
            let shape = acc.value(*x).shape().to_vec();
            acc.add(*x, g.clone().reshape(&shape)?);
        }
    }
    Ok(())
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * PI).sqrt());
    cdf + x * pdf
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row block used when splitting a flattened `(rows, K) @ (K, P)` product so
/// the call sequence does not depend on whether the pool is in use.
const ROW_BLOCK: usize = 64;

struct MatMulPlan {
    m: usize,
    k: usize,
    p: usize,
    out_shape: Vec<usize>,
    /// Number of output batches.
    batches: usize,
    /// `b` has no batch dimensions: `a` is treated as one `(batches*M, K)` matrix.
    shared_rhs: bool,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
    a_batches: usize,
    b_batches: usize,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(
                "matmul",
                format!("operands need rank >= 2, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {sa:?} @ {sb:?}"),
            ));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = index::broadcast_shape(ba, bb).ok_or_else(|| {
            Error::dim(
                "matmul",
                format!("batch dimensions do not broadcast: {sa:?} @ {sb:?}"),
            )
        })?;
        let batches: usize = batch.iter().product();
        let a_batches: usize = ba.iter().product();
        let b_batches: usize = bb.iter().product();
        let shared_rhs = bb.is_empty() && ba == batch.as_slice();
        let (a_off, b_off) = if shared_rhs {
            (Vec::new(), Vec::new())
        } else {
            let ao = index::strided_offsets(&batch, &index::broadcast_strides(ba, &batch));
            let bo = index::strided_offsets(&batch, &index::broadcast_strides(bb, &batch));
            (ao, bo)
        };
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(p);
        Ok(Self {
            m,
            k,
            p,
            out_shape,
            batches,
            shared_rhs,
            a_off,
            b_off,
            a_batches,
            b_batches,
        })
    }

    fn out_numel(&self) -> usize {
        self.batches * self.m * self.p
    }

    fn forward<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, p) = (self.m, self.k, self.p);
        if self.out_numel() == 0 {
            return;
        }
        if self.shared_rhs {
            let rows = self.batches * m;
            parallel::for_each_chunk_mut(out, ROW_BLOCK * p, |blk, c| {
                let r0 = blk * ROW_BLOCK;
                let nr = c.len() / p;
                T::gemm(nr, k, p, T::one(), &a[r0 * k..], k as isize, 1, b, p as isize, 1, T::zero(), c, p as isize, 1);
            });
            debug_assert_eq!(rows * p, out.len());
            return;
        }
        parallel::for_each_chunk_mut(out, m * p, |bi, c| {
            let ao = self.a_off[bi] * m * k;
            let bo = self.b_off[bi] * k * p;
            T::gemm(m, k, p, T::one(), &a[ao..], k as isize, 1, &b[bo..], p as isize, 1, T::zero(), c, p as isize, 1);
        });
    }

    /// `dA = dC @ B^T`, summed over broadcast batches.
    fn grad_a<T: Scalar>(&self, g: &[T], b: &[T], ga: &mut [T]) {
        let (m, k, p) = (self.m, self.k, self.p);
        if ga.is_empty() {
            return;
        }
        if self.shared_rhs {
            parallel::for_each_chunk_mut(ga, ROW_BLOCK * k, |blk, c| {
                let r0 = blk * ROW_BLOCK;
                let nr = c.len() / k;
                T::gemm(nr, p, k, T::one(), &g[r0 * p..], p as isize, 1, b, 1, p as isize, T::zero(), c, k as isize, 1);
            });
            return;
        }
        if self.a_batches == self.batches {
            parallel::for_each_chunk_mut(ga, m * k, |bi, c| {
                let bo = self.b_off[bi] * k * p;
                T::gemm(m, p, k, T::one(), &g[bi * m * p..], p as isize, 1, &b[bo..], 1, p as isize, T::zero(), c, k as isize, 1);
            });
        } else {
            for bi in 0..self.batches {
                let ao = self.a_off[bi] * m * k;
                let bo = self.b_off[bi] * k * p;
                T::gemm(m, p, k, T::one(), &g[bi * m * p..], p as isize, 1, &b[bo..], 1, p as isize, T::one(), &mut ga[ao..], k as isize, 1);
            }
        }
    }

    /// `dB = A^T @ dC`, summed over broadcast batches.
    fn grad_b<T: Scalar>(&self, a: &[T], g: &[T], gb: &mut [T]) {
        let (m, k, p) = (self.m, self.k, self.p);
        if gb.is_empty() {
            return;
        }
        if self.shared_rhs {
            let rows = self.batches * m;
            T::gemm(k, rows, p, T::one(), a, 1, k as isize, g, p as isize, 1, T::zero(), gb, p as isize, 1);
            return;
        }
        if self.b_batches == self.batches {
            parallel::for_each_chunk_mut(gb, k * p, |bi, c| {
                let ao = self.a_off[bi] * m * k;
                T::gemm(k, m, p, T::one(), &a[ao..], 1, k as isize, &g[bi * m * p..], p as isize, 1, T::zero(), c, p as isize, 1);
            });
        } else {
            for bi in 0..self.batches {
                let ao = self.a_off[bi] * m * k;
                let bo = self.b_off[bi] * k * p;
                T::gemm(k, m, p, T::one(), &a[ao..], 1, k as isize, &g[bi * m * p..], p as isize, 1, T::one(), &mut gb[bo..], p as isize, 1);
            }
        }
    }
}
