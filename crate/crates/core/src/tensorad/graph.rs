use std::sync::Arc;

use super::tensor::{
    broadcast_shape, broadcast_strides, cholesky, cholesky_solve, erf_approx, for_each_broadcast,
    gemm_acc, gemm_nt_acc, gemm_tn_acc, sigmoid, softplus,
};
use super::{Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    AddScalar(f64),
    MulScalar(f64),
    LeakyRelu(f64),
    Tanh,
    Exp,
    Log,
    Erf,
    Cos,
    Softplus,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2dSame(Var, Var),
    AvgPool2x2(Var),
    Softmax(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Mean(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Broadcast(Var),
    SpdSolve(Var, Var),
    SpdLogdet(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Append-only tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients of a scalar with respect to the tracked leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient as a flat vector, zeros if the leaf did not influence the output.
    pub fn flat(&self, g: &Graph, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; g.value(v).len()],
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracking leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Constant leaf sharing storage with the caller.
    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let xv = self.value(x);
        let out = match kind {
            Unary::Neg => xv.map(|a| -a),
            Unary::AddScalar(c) => xv.map(|a| a + c),
            Unary::MulScalar(c) => xv.map(|a| a * c),
            Unary::LeakyRelu(s) => xv.map(|a| if a > 0.0 { a } else { s * a }),
            Unary::Tanh => xv.map(f64::tanh),
            Unary::Exp => xv.map(f64::exp),
            Unary::Log => xv.map(f64::ln),
            Unary::Erf => xv.map(erf_approx),
            Unary::Cos => xv.map(f64::cos),
            Unary::Softplus => xv.map(softplus),
        };
        let tracked = self.nodes[x.0].tracked;
        self.push(out, Op::Unary(kind, x), tracked)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), x)
    }
    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::MulScalar(c), x)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn erf(&mut self, x: Var) -> Var {
        self.unary(Unary::Erf, x)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(Unary::Cos, x)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }
    /// `ln sigmoid(x) = -softplus(-x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        let s = self.softplus(n);
        self.neg(s)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.nodes_binary(Binary::Mul, x, x)
            .expect("identical shapes always broadcast")
    }
    /// `sqrt(x)` for positive `x`, via `exp(0.5 ln x)`.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let l = self.log(x);
        let h = self.mul_scalar(l, 0.5);
        self.exp(h)
    }

    fn nodes_binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let out_shape =
            broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| shape_err(name, av.shape(), bv.shape()))?;
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(av.shape(), &out_shape);
            let sb = broadcast_strides(bv.shape(), &out_shape);
            let mut data = vec![0.0; out_shape.iter().product()];
            let (ad, bd) = (av.data(), bv.data());
            for_each_broadcast(&out_shape, &sa, &sb, |k, ia, ib| data[k] = f(ad[ia], bd[ib]));
            data
        };
        let tracked = self.nodes[a.0].tracked || self.nodes[b.0].tracked;
        Ok(self.push(
            Tensor::new(&out_shape, data).expect("broadcast shape"),
            Op::Binary(kind, a, b),
            tracked,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.nodes_binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.nodes_binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.nodes_binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.nodes_binary(Binary::Div, a, b)
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let tracked = self.nodes[a.0].tracked || self.nodes[b.0].tracked;
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(shape_err("transpose", xv.shape(), &[]));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let d = xv.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(x), tracked))
    }

    /// 2-D convolution (cross-correlation) with zero padding that preserves the
    /// spatial extent. `x: [N,C,H,W]`, `kernel: [O,C,kh,kw]` with odd kh, kw.
    pub fn conv2d_same(&mut self, x: Var, kernel: Var) -> Result<Var, TensorError> {
        let (xv, wv) = (self.value(x), self.value(kernel));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(shape_err("conv2d_same", xs, ws));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let mut out = vec![0.0; n * o * h * w];
        conv_forward(xv.data(), wv.data(), &mut out, [n, c, h, w], [o, kh, kw]);
        let tracked = self.nodes[x.0].tracked || self.nodes[kernel.0].tracked;
        Ok(self.push(Tensor::new(&[n, o, h, w], out)?, Op::Conv2dSame(x, kernel), tracked))
    }

    /// 2x2 average pooling with stride 2 over the last two axes.
    pub fn avgpool2x2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 || s[s.len() - 1] % 2 != 0 || s[s.len() - 2] % 2 != 0 {
            return Err(shape_err("avgpool2x2", s, &[2, 2]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let (ho, wo) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let ip = &d[p * h * w..(p + 1) * h * w];
            let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i0 = 2 * y * w + 2 * xx;
                    op[y * wo + xx] = 0.25 * (ip[i0] + ip[i0 + 1] + ip[i0 + w] + ip[i0 + w + 1]);
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(Tensor::new(&shape, out)?, Op::AvgPool2x2(x), tracked))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap_or(&1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = xv.shape().to_vec();
        let tracked = self.nodes[x.0].tracked;
        self.push(Tensor::new(&shape, out).expect("same shape"), Op::Softmax(x), tracked)
    }

    /// Sum of all elements (shape `[]`).
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let tracked = self.nodes[x.0].tracked;
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// Mean of all elements (shape `[]`).
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let tracked = self.nodes[x.0].tracked;
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::Axis {
                op: "sum_axis",
                axis,
                rank: xv.rank(),
            });
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis(x, axis), tracked))
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                rank: xv.rank(),
            });
        }
        if start > end || end > xv.shape()[axis] {
            return Err(shape_err("slice", xv.shape(), &[start, end]));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let width = end - start;
        let d = xv.data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = width;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, tracked))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || (0..s.len()).any(|i| i != axis && s[i] != first[i]) {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let tracked = parts.iter().any(|p| self.nodes[p.0].tracked);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec(), axis), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = (*self.nodes[x.0].value).clone().reshaped(shape)?;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    /// Explicit broadcast to `shape`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        match broadcast_shape(xv.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(shape_err("broadcast", xv.shape(), shape)),
        }
        let sa = broadcast_strides(xv.shape(), shape);
        let zero = vec![0; shape.len()];
        let d = xv.data();
        let mut out = vec![0.0; shape.iter().product()];
        for_each_broadcast(shape, &sa, &zero, |k, ia, _| out[k] = d[ia]);
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(Tensor::new(shape, out)?, Op::Broadcast(x), tracked))
    }

    /// Solves `A X = B` for symmetric positive definite `A: [n,n]`, `B: [n,k]`.
    /// Only the symmetric part of `A` is read.
    pub fn spd_solve(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sa[0] != sa[1] || sb.len() != 2 || sb[0] != sa[0] {
            return Err(shape_err("spd_solve", sa, sb));
        }
        let n = sa[0];
        let k = sb[1];
        let l = cholesky(&symmetrized(av.data(), n), n).ok_or(TensorError::NotPositiveDefinite("spd_solve"))?;
        let mut x = bv.data().to_vec();
        cholesky_solve(&l, n, &mut x, k);
        let tracked = self.nodes[a.0].tracked || self.nodes[b.0].tracked;
        Ok(self.push(Tensor::new(&[n, k], x)?, Op::SpdSolve(a, b), tracked))
    }

    /// `ln det A` for symmetric positive definite `A`.
    pub fn spd_logdet(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(shape_err("spd_logdet", s, s));
        }
        let n = s[0];
        let l = cholesky(&symmetrized(av.data(), n), n).ok_or(TensorError::NotPositiveDefinite("spd_logdet"))?;
        let ld: f64 = (0..n).map(|i| 2.0 * l[i * n + i].ln()).sum();
        let tracked = self.nodes[a.0].tracked;
        Ok(self.push(Tensor::scalar(ld), Op::SpdLogdet(a), tracked))
    }

    /// Allows [`Graph::backward`] to run again.
    pub fn clear_backward(&mut self) {
        self.backward_done = false;
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&mut self, y: Var) -> Result<Gradients, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyGraph);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let yshape = self.value(y).shape().to_vec();
        if self.value(y).len() != 1 {
            return Err(TensorError::NotScalar(yshape));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[y.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[y.0] = Some(Tensor::full(&yshape, 1.0));
        for i in (0..=y.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot => *slot = Some(contrib),
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let gd = g.data();
                let xd = xv.data();
                let yd = y.data();
                let data: Vec<f64> = (0..gd.len())
                    .map(|k| {
                        let d = match *kind {
                            Unary::Neg => -1.0,
                            Unary::AddScalar(_) => 1.0,
                            Unary::MulScalar(c) => c,
                            Unary::LeakyRelu(s) => {
                                if xd[k] > 0.0 {
                                    1.0
                                } else {
                                    s
                                }
                            }
                            Unary::Tanh => 1.0 - yd[k] * yd[k],
                            Unary::Exp => yd[k],
                            Unary::Log => 1.0 / xd[k],
                            Unary::Erf => std::f64::consts::FRAC_2_SQRT_PI * (-xd[k] * xd[k]).exp(),
                            Unary::Cos => -xd[k].sin(),
                            Unary::Softplus => sigmoid(xd[k]),
                        };
                        gd[k] * d
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data).expect("shape"));
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let out = y.shape();
                let sa = broadcast_strides(av.shape(), out);
                let sb = broadcast_strides(bv.shape(), out);
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                let mut ga = self.tracked(*a).then(|| vec![0.0; av.len()]);
                let mut gb = self.tracked(*b).then(|| vec![0.0; bv.len()]);
                for_each_broadcast(out, &sa, &sb, |k, ia, ib| {
                    let gk = gd[k];
                    let (da, db) = match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (bd[ib], ad[ia]),
                        Binary::Div => (1.0 / bd[ib], -ad[ia] / (bd[ib] * bd[ib])),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += gk * da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += gk * db;
                    }
                });
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, Tensor::new(av.shape(), ga).expect("shape"));
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), gb).expect("shape"));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.tracked(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt_acc(g.data(), bv.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga).expect("shape"));
                }
                if self.tracked(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn_acc(av.data(), g.data(), &mut gb, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], gb).expect("shape"));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let gd = g.data();
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        gx[c * m + r] = gd[r * n + c];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, m], gx).expect("shape"));
            }
            Op::Conv2dSame(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let xs = xv.shape();
                let ws = wv.shape();
                let dims = [xs[0], xs[1], xs[2], xs[3]];
                let kdims = [ws[0], ws[2], ws[3]];
                if self.tracked(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    conv_backward_input(g.data(), wv.data(), &mut gx, dims, kdims);
                    self.accumulate(grads, *x, Tensor::new(xs, gx).expect("shape"));
                }
                if self.tracked(*w) {
                    let mut gw = vec![0.0; wv.len()];
                    conv_backward_kernel(g.data(), xv.data(), &mut gw, dims, kdims);
                    self.accumulate(grads, *w, Tensor::new(ws, gw).expect("shape"));
                }
            }
            Op::AvgPool2x2(x) => {
                let xs = self.value(*x).shape();
                let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let (ho, wo) = (h / 2, w / 2);
                let planes = g.len() / (ho * wo);
                let gd = g.data();
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for yy in 0..ho {
                        for xx in 0..wo {
                            let v = 0.25 * gd[p * ho * wo + yy * wo + xx];
                            let i0 = p * h * w + 2 * yy * w + 2 * xx;
                            gx[i0] += v;
                            gx[i0 + 1] += v;
                            gx[i0 + w] += v;
                            gx[i0 + w + 1] += v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx).expect("shape"));
            }
            Op::Softmax(x) => {
                let n = *y.shape().last().unwrap_or(&1);
                let yd = y.data();
                let gd = g.data();
                let mut gx = vec![0.0; yd.len()];
                for r in 0..yd.len() / n.max(1) {
                    let ys = &yd[r * n..(r + 1) * n];
                    let gs = &gd[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), gx).expect("shape"));
            }
            Op::Sum(x) => {
                let xs = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::full(xs, g.data()[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = g.data()[0] / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), v));
            }
            Op::SumAxis(x, axis) => {
                let xs = self.value(*x).shape();
                let (outer, len, inner) = split_axis(xs, *axis);
                let gd = g.data();
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx).expect("shape"));
            }
            Op::Slice { x, axis, start } => {
                let xs = self.value(*x).shape();
                let (outer, len, inner) = split_axis(xs, *axis);
                let width = y.shape()[*axis];
                let gd = g.data();
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    gx[(o * len + start) * inner..(o * len + start + width) * inner]
                        .copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx).expect("shape"));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let gd = g.data();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape();
                    let len = ps[*axis];
                    if self.tracked(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps, gp).expect("shape"));
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                let xs = self.value(*x).shape();
                self.accumulate(grads, *x, g.clone().reshaped(xs).expect("shape"));
            }
            Op::Broadcast(x) => {
                let xs = self.value(*x).shape();
                let sa = broadcast_strides(xs, y.shape());
                let zero = vec![0; y.rank()];
                let gd = g.data();
                let mut gx = vec![0.0; xs.iter().product()];
                for_each_broadcast(y.shape(), &sa, &zero, |k, ia, _| gx[ia] += gd[k]);
                self.accumulate(grads, *x, Tensor::new(xs, gx).expect("shape"));
            }
            Op::SpdSolve(a, b) => {
                let av = self.value(*a);
                let n = av.shape()[0];
                let k = y.shape()[1];
                let l = cholesky(&symmetrized(av.data(), n), n).expect("factorized in forward pass");
                // gB = A^{-1} G, gA = -sym(gB X^T) since the forward pass reads sym(A)
                let mut gb = g.data().to_vec();
                cholesky_solve(&l, n, &mut gb, k);
                if self.tracked(*a) {
                    let mut ga = vec![0.0; n * n];
                    gemm_nt_acc(&gb, y.data(), &mut ga, n, k, n);
                    let mut ga = symmetrized(&ga, n);
                    ga.iter_mut().for_each(|v| *v = -*v);
                    self.accumulate(grads, *a, Tensor::new(&[n, n], ga).expect("shape"));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, Tensor::new(&[n, k], gb).expect("shape"));
                }
            }
            Op::SpdLogdet(a) => {
                let av = self.value(*a);
                let n = av.shape()[0];
                let l = cholesky(&symmetrized(av.data(), n), n).expect("factorized in forward pass");
                let mut inv = vec![0.0; n * n];
                for i in 0..n {
                    inv[i * n + i] = 1.0;
                }
                cholesky_solve(&l, n, &mut inv, n);
                let s = g.data()[0];
                inv.iter_mut().for_each(|v| *v *= s);
                self.accumulate(grads, *a, Tensor::new(&[n, n], inv).expect("shape"));
            }
        }
    }
}

fn conv_forward(x: &[f64], w: &[f64], out: &mut [f64], dims: [usize; 4], kdims: [usize; 3]) {
    let [n, c, h, wd] = dims;
    let [o, kh, kw] = kdims;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * wd;
    for b in 0..n {
        for oc in 0..o {
            let op = &mut out[(b * o + oc) * plane..(b * o + oc + 1) * plane];
            for ic in 0..c {
                let ip = &x[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                for ky in 0..kh {
                    let dy = ky as isize - ph;
                    for kx in 0..kw {
                        let dx = kx as isize - pw;
                        let wv = w[((oc * c + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (y0, y1) = valid_range(h, dy);
                        let (x0, x1) = valid_range(wd, dx);
                        for yy in y0..y1 {
                            let yi = (yy as isize + dy) as usize;
                            let orow = &mut op[yy * wd + x0..yy * wd + x1];
                            let irow = &ip[yi * wd + (x0 as isize + dx) as usize..yi * wd + (x1 as isize + dx) as usize];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input(g: &[f64], w: &[f64], gx: &mut [f64], dims: [usize; 4], kdims: [usize; 3]) {
    let [n, c, h, wd] = dims;
    let [o, kh, kw] = kdims;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * wd;
    for b in 0..n {
        for oc in 0..o {
            let gp = &g[(b * o + oc) * plane..(b * o + oc + 1) * plane];
            for ic in 0..c {
                let xp = &mut gx[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                for ky in 0..kh {
                    let dy = ky as isize - ph;
                    for kx in 0..kw {
                        let dx = kx as isize - pw;
                        let wv = w[((oc * c + ic) * kh + ky) * kw + kx];
                        let (y0, y1) = valid_range(h, dy);
                        let (x0, x1) = valid_range(wd, dx);
                        for yy in y0..y1 {
                            let yi = (yy as isize + dy) as usize;
                            let grow = &gp[yy * wd + x0..yy * wd + x1];
                            let xrow = &mut xp[yi * wd + (x0 as isize + dx) as usize..yi * wd + (x1 as isize + dx) as usize];
                            for (xv, gv) in xrow.iter_mut().zip(grow) {
                                *xv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel(g: &[f64], x: &[f64], gw: &mut [f64], dims: [usize; 4], kdims: [usize; 3]) {
    let [n, c, h, wd] = dims;
    let [o, kh, kw] = kdims;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * wd;
    for b in 0..n {
        for oc in 0..o {
            let gp = &g[(b * o + oc) * plane..(b * o + oc + 1) * plane];
            for ic in 0..c {
                let xp = &x[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                for ky in 0..kh {
                    let dy = ky as isize - ph;
                    for kx in 0..kw {
                        let dx = kx as isize - pw;
                        let (y0, y1) = valid_range(h, dy);
                        let (x0, x1) = valid_range(wd, dx);
                        let mut s = 0.0;
                        for yy in y0..y1 {
                            let yi = (yy as isize + dy) as usize;
                            let grow = &gp[yy * wd + x0..yy * wd + x1];
                            let xrow = &xp[yi * wd + (x0 as isize + dx) as usize..yi * wd + (x1 as isize + dx) as usize];
                            for (gv, xv) in grow.iter().zip(xrow) {
                                s += gv * xv;
                            }
                        }
                        gw[((oc * c + ic) * kh + ky) * kw + kx] += s;
                    }
                }
            }
        }
    }
}

fn symmetrized(a: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
        }
    }
    s
}

/// Output positions `p` along an axis of extent `len` for which `p + d` is in bounds.
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_negative_slope() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0));
        let y = g.leaky_relu(x, 0.01);
        assert_eq!(g.value(y).item(), Some(-0.01));
    }

    #[test]
    fn identity_kernel_leaves_image_unchanged() {
        let mut g = Graph::new();
        let img: Vec<f64> = (0..2 * 25).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.constant(Tensor::new(&[1, 2, 5, 5], img.clone()).unwrap());
        let mut k = vec![0.0; 2 * 2 * 9];
        k[4] = 1.0; // out 0 <- in 0
        k[3 * 9 + 4] = 1.0; // out 1 <- in 1
        let w = g.constant(Tensor::new(&[2, 2, 3, 3], k).unwrap());
        let y = g.conv2d_same(x, w).unwrap();
        assert_eq!(g.value(y).data(), &img[..]);
    }

    #[test]
    fn avgpool_mean_of_block() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = g.avgpool2x2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1]);
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn avgpool_backward_quarter() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
        let p = g.avgpool2x2(x).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn tanh_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.tanh(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.7]));
        let y = g.softmax(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        for v in grads.get(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![4, 3]
            }
        );
        assert!(matches!(g.add(a, b), Err(TensorError::Shape { op: "add", .. })));
    }

    #[test]
    fn backward_guards() {
        let mut g = Graph::new();
        assert_eq!(g.backward(Var(0)).unwrap_err(), TensorError::EmptyGraph);
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(TensorError::NotScalar(_))));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::BackwardTwice);
        g.clear_backward();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn shared_paths_accumulate() {
        // d/dx (x*x + x) = 2x + 1
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.square(x);
        let y = g.add(sq, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }
}
