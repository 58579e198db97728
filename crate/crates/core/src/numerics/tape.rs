//! Eagerly recorded reverse-mode tape.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward sweep. A tape lives for one forward pass; parameters
//! enter it by copy and their gradients are read back after [`Tape::backward`].

use crate::error::{Error, Result};
use crate::numerics::conv::{self, ConvGeom, PoolGeom};
use crate::numerics::linalg::{gemm, Mat};
use crate::numerics::tensor::{numel, ResizePlan, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<usize> },
    Add(Var, Var, Option<Vec<usize>>),
    Sub(Var, Var, Option<Vec<usize>>),
    Mul(Var, Var, Option<Vec<usize>>),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Abs(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumDim { x: Var, outer: usize, len: usize, inner: usize },
    MaxDim { x: Var, outer: usize, len: usize, inner: usize, argmax: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    MatMul { a: Var, b: Var, rows: usize, k: usize, m: usize },
    Bmm { a: Var, b: Var, batch: usize, n: usize, k: usize, m: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Resize { x: Var, plan: ResizePlan },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Normalize { x: Var, len: usize, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Norm floor used by [`Tape::normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn split_dim(shape: &[usize], dim: usize) -> Result<(usize, usize, usize)> {
    if dim >= shape.len() {
        return Err(Error::shape(format!("dim {dim} out of range for {shape:?}")));
    }
    Ok((numel(&shape[..dim]), shape[dim], numel(&shape[dim + 1..])))
}

/// For numpy-style broadcasting of `b` against `a`'s shape: the index into
/// `b` for every element of `a`, or `None` when the shapes are equal.
fn broadcast_map(a: &[usize], b: &[usize]) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    if b.len() > a.len() {
        return Err(Error::shape(format!("cannot broadcast {b:?} onto {a:?}")));
    }
    let offset = a.len() - b.len();
    let mut strides = vec![0usize; a.len()];
    let mut s = 1;
    for i in (0..b.len()).rev() {
        let (bd, ad) = (b[i], a[offset + i]);
        if bd == ad {
            strides[offset + i] = s;
        } else if bd != 1 {
            return Err(Error::shape(format!("cannot broadcast {b:?} onto {a:?}")));
        }
        s *= bd;
    }
    let n = numel(a);
    let mut map = Vec::with_capacity(n);
    if n == 0 {
        return Ok(Some(map));
    }
    let mut idx = vec![0usize; a.len()];
    let mut bi = 0usize;
    for _ in 0..n {
        map.push(bi);
        for d in (0..a.len()).rev() {
            idx[d] += 1;
            bi += strides[d];
            if idx[d] < a[d] {
                break;
            }
            bi -= strides[d] * a[d];
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}

fn permuted_shape(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(Error::shape(format!("permutation {perm:?} for shape {shape:?}")));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(Error::shape(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

/// Scatter/gather through a permutation. With `inverse == false`,
/// `out[j] = src[map(j)]`; otherwise `out[map(j)] += src[j]`.
fn permute_data(src: &[f64], shape: &[usize], perm: &[usize], out: &mut [f64], inverse: bool) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    if n == 0 {
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut si = 0usize;
    for j in 0..n {
        if inverse {
            out[si] += src[j];
        } else {
            out[j] = src[si];
        }
        for d in (0..nd).rev() {
            idx[d] += 1;
            si += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            si -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

fn reduce_broadcast(g: &[f64], map: &Option<Vec<usize>>, len: usize) -> Vec<f64> {
    match map {
        None => g.to_vec(),
        Some(map) => {
            let mut out = vec![0.0; len];
            for (gi, &bi) in g.iter().zip(map) {
                out[bi] += gi;
            }
            out
        }
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

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Leaf whose gradient tracking follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf { param: None }, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Leaf bound to an external parameter slot `key`.
    pub fn param(&mut self, key: usize, t: &Tensor, trainable: bool) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        self.push(value, Op::Leaf { param: Some(key) }, trainable)
    }

    /// Same value, cut from the graph: nothing upstream receives gradient through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut value = self.value(v).clone();
        value.zero_grad();
        self.constant(value)
    }

    /// Gradients of every trainable parameter leaf, keyed by slot.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Leaf { param: Some(k) }, Some(g)) => Some((*k, g.as_slice())),
            _ => None,
        })
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Option<Vec<usize>>)> {
        let (av, bv) = (self.value(a), self.value(b));
        let map = broadcast_map(av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let data = match &map {
            None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => ad.iter().zip(m).map(|(&x, &bi)| f(x, bd[bi])).collect(),
        };
        Ok((Tensor::new(av.shape(), data)?, map))
    }

    /// Elementwise `a + b`; `b` broadcasts onto `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map) = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b, map), rg))
    }

    /// Elementwise `a - b`; `b` broadcasts onto `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map) = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b, map), rg))
    }

    /// Elementwise `a * b`; `b` broadcasts onto `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map) = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b, map), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over `dim`, removing it.
    pub fn sum_dim(&mut self, x: Var, dim: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_dim(&shape, dim)?;
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut s = shape;
        s.remove(dim);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&s, out)?, Op::SumDim { x, outer, len, inner }, rg))
    }

    /// Max over `dim`, removing it. Ties go to the lowest index.
    pub fn max_dim(&mut self, x: Var, dim: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_dim(&shape, dim)?;
        if len == 0 {
            return Err(Error::shape("max over an empty dimension"));
        }
        let d = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = d[o * len * inner + i];
                for l in 1..len {
                    let v = d[(o * len + l) * inner + i];
                    if v > bv {
                        bv = v;
                        best = l;
                    }
                }
                out[o * inner + i] = bv;
                argmax[o * inner + i] = best;
            }
        }
        let mut s = shape;
        s.remove(dim);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&s, out)?, Op::MaxDim { x, outer, len, inner, argmax }, rg))
    }

    /// Index along the reduced dim of a [`Tape::max_dim`] output, or the flat
    /// input index of a [`Tape::max_pool2d`] output.
    pub fn argmax_of(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxDim { argmax, .. } | Op::MaxPool2d { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape, self.data(x).to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out_shape = permuted_shape(&shape, perm)?;
        let mut out = vec![0.0; numel(&shape)];
        permute_data(self.data(x), &shape, perm, &mut out, false);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn transpose(&mut self, x: Var, d0: usize, d1: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if d0 >= perm.len() || d1 >= perm.len() {
            return Err(Error::shape(format!("transpose({d0}, {d1}) of {:?}", self.shape(x))));
        }
        perm.swap(d0, d1);
        self.permute(x, &perm)
    }

    /// `a[..., n, k] · b[k, m] -> [..., n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.is_empty() || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(Error::shape(format!("matmul of {ash:?} and {bsh:?}")));
        }
        let (k, m) = (bsh[0], bsh[1]);
        let rows = numel(&ash) / k.max(1);
        let mut out = vec![0.0; rows * m];
        gemm(Mat::row_major(self.data(a), rows, k), Mat::row_major(self.data(b), k, m), &mut out, 0.0);
        let mut s = ash;
        *s.last_mut().unwrap() = m;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&s, out)?, Op::MatMul { a, b, rows, k, m }, rg))
    }

    /// Batched `a[B, n, k] · b[B, k, m] -> [B, n, m]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::shape(format!("bmm of {ash:?} and {bsh:?}")));
        }
        let (batch, n, k, m) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![0.0; batch * n * m];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                Mat::row_major(&ad[i * n * k..(i + 1) * n * k], n, k),
                Mat::row_major(&bd[i * k * m..(i + 1) * k * m], k, m),
                &mut out[i * n * m..(i + 1) * n * m],
                0.0,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[batch, n, m], out)?, Op::Bmm { a, b, batch, n, k, m }, rg))
    }

    /// Cross-correlation of `x[B, C, H, W]` with `w[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv(x, w, None, stride, padding)
    }

    /// [`Tape::conv2d`] plus a per-output-channel bias `b[O]`.
    pub fn conv2d_bias(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv(x, w, Some(b), stride, padding)
    }

    fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_c] {
                return Err(Error::shape(format!("conv bias {:?} for {} output channels", self.shape(b), geom.out_c)));
            }
        }
        let (mut out, cols) = conv::forward(&geom, self.data(x), self.data(w));
        if let Some(b) = b {
            let plane = geom.out_h * geom.out_w;
            let bias = self.data(b);
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let v = bias[i % geom.out_c];
                chunk.iter_mut().for_each(|o| *o += v);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let cols = if rg { cols } else { Vec::new() };
        let t = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Non-overlapping `size × size` max pooling over the last two dims.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), size)?;
        let (out, argmax) = conv::max_pool(&geom, self.data(x));
        let rg = self.rg(x);
        let t = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.push(t, Op::MaxPool2d { x, argmax }, rg))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let plan = ResizePlan::new(self.shape(x), out_h, out_w)?;
        let mut out = vec![0.0; plan.out_len()];
        plan.forward(self.data(x), &mut out);
        let t = Tensor::new(&plan.out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Resize { x, plan }, rg))
    }

    fn softmax_rows(d: &[f64], outer: usize, len: usize, inner: usize, log: bool) -> Vec<f64> {
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|l| (d[at(l)] - mx).exp()).sum();
                for l in 0..len {
                    out[at(l)] = if log { d[at(l)] - mx - z.ln() } else { (d[at(l)] - mx).exp() / z };
                }
            }
        }
        out
    }

    pub fn softmax(&mut self, x: Var, dim: usize) -> Result<Var> {
        let (outer, len, inner) = split_dim(self.shape(x), dim)?;
        let out = Self::softmax_rows(self.data(x), outer, len, inner, false);
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, outer, len, inner }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, dim: usize) -> Result<Var> {
        let (outer, len, inner) = split_dim(self.shape(x), dim)?;
        let out = Self::softmax_rows(self.data(x), outer, len, inner, true);
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax { x, outer, len, inner }, rg))
    }

    /// Batch-mean cross-entropy of `logits[B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 || sh[0] != labels.len() || sh[0] == 0 {
            return Err(Error::shape(format!("cross_entropy of logits {sh:?} with {} labels", labels.len())));
        }
        let k = sh[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(format!("label {bad} out of range for {k} classes")));
        }
        let probs = Self::softmax_rows(self.data(logits), sh[0], k, 1, false);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(b, &l)| {
                let row = &self.data(logits)[b * k..(b + 1) * k];
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .sum::<f64>()
            / labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// L2-normalize along the last dim; norms below [`NORM_EPS`] are floored.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| Error::shape("normalize of a scalar"))?;
        let d = self.data(x);
        let rows = d.len().checked_div(len).unwrap_or(0);
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * len..(r + 1) * len];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(n);
            for (o, v) in out[r * len..(r + 1) * len].iter_mut().zip(row) {
                *o = v / n;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Normalize { x, len, norms }, rg))
    }

    /// Cosine similarity of equally shaped `a` and `b` along `dim` (removed).
    pub fn cosine_similarity(&mut self, a: Var, b: Var, dim: usize) -> Result<Var> {
        let nd = self.shape(a).len();
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("cosine_similarity of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let (a, b) =
            if dim + 1 == nd { (a, b) } else { (self.transpose(a, dim, nd - 1)?, self.transpose(b, dim, nd - 1)?) };
        let na = self.normalize(a)?;
        let nb = self.normalize(b)?;
        let prod = self.mul(na, nb)?;
        // After the swap the reduced axis is last; dropping it leaves the
        // remaining axes in their original order.
        self.sum_dim(prod, nd - 1)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !self.rg(loss) {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let rg = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| nodes[v.0].value.data();
            let send = |v: Var, contrib: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if rg(v) {
                    match &mut grads[v.0] {
                        Some(a) => a.iter_mut().zip(&contrib).for_each(|(x, y)| *x += y),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            };
            let out = node.value.data();
            match &node.op {
                Op::Leaf { .. } => leaf_grads.push((i, g)),
                Op::Add(a, b, map) => {
                    if rg(*b) {
                        let gb = reduce_broadcast(&g, map, val(*b).len());
                        send(*b, gb, &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Sub(a, b, map) => {
                    if rg(*b) {
                        let mut gb = reduce_broadcast(&g, map, val(*b).len());
                        gb.iter_mut().for_each(|v| *v = -*v);
                        send(*b, gb, &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b, map) => {
                    let (ad, bd) = (val(*a), val(*b));
                    if rg(*a) {
                        let ga = match map {
                            None => g.iter().zip(bd).map(|(x, y)| x * y).collect(),
                            Some(m) => g.iter().zip(m).map(|(x, &bi)| x * bd[bi]).collect(),
                        };
                        send(*a, ga, &mut grads);
                    }
                    if rg(*b) {
                        let prod: Vec<f64> = g.iter().zip(ad).map(|(x, y)| x * y).collect();
                        let gb = reduce_broadcast(&prod, map, bd.len());
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Scale(x, s) => send(*x, g.iter().map(|v| v * s).collect(), &mut grads),
                Op::AddScalar(x) | Op::Reshape(x) => send(*x, g, &mut grads),
                Op::Relu(x) => {
                    let xd = val(*x);
                    let gx = g.iter().zip(xd).map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 });
                    send(*x, gx.collect(), &mut grads);
                }
                Op::Abs(x) => {
                    let xd = val(*x);
                    let gx = g.iter().zip(xd).map(|(&gv, &v)| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    });
                    send(*x, gx.collect(), &mut grads);
                }
                Op::Sigmoid(x) => {
                    let gx = g.iter().zip(out).map(|(gv, s)| gv * s * (1.0 - s));
                    send(*x, gx.collect(), &mut grads);
                }
                Op::Exp(x) => {
                    let gx = g.iter().zip(out).map(|(gv, e)| gv * e);
                    send(*x, gx.collect(), &mut grads);
                }
                Op::Square(x) => {
                    let gx = g.iter().zip(val(*x)).map(|(gv, v)| 2.0 * gv * v);
                    send(*x, gx.collect(), &mut grads);
                }
                Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()], &mut grads),
                Op::Mean(x) => {
                    let n = val(*x).len();
                    send(*x, vec![g[0] / n as f64; n], &mut grads);
                }
                Op::SumDim { x, outer, len, inner } => {
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..*outer {
                        for l in 0..*len {
                            let base = (o * len + l) * inner;
                            gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::MaxDim { x, outer, len, inner, argmax } => {
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let l = argmax[o * inner + i];
                            gx[(o * len + l) * inner + i] = g[o * inner + i];
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::Permute { x, perm } => {
                    let shape = nodes[x.0].value.shape();
                    let mut gx = vec![0.0; g.len()];
                    permute_data(&g, shape, perm, &mut gx, true);
                    send(*x, gx, &mut grads);
                }
                Op::MatMul { a, b, rows, k, m } => {
                    let (rows, k, m) = (*rows, *k, *m);
                    if rg(*a) {
                        let mut ga = vec![0.0; rows * k];
                        gemm(Mat::row_major(&g, rows, m), Mat::row_major(val(*b), k, m).t(), &mut ga, 0.0);
                        send(*a, ga, &mut grads);
                    }
                    if rg(*b) {
                        let mut gb = vec![0.0; k * m];
                        gemm(Mat::row_major(val(*a), rows, k).t(), Mat::row_major(&g, rows, m), &mut gb, 0.0);
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Bmm { a, b, batch, n, k, m } => {
                    let (batch, n, k, m) = (*batch, *n, *k, *m);
                    let (ad, bd) = (val(*a), val(*b));
                    if rg(*a) {
                        let mut ga = vec![0.0; batch * n * k];
                        for i in 0..batch {
                            gemm(
                                Mat::row_major(&g[i * n * m..(i + 1) * n * m], n, m),
                                Mat::row_major(&bd[i * k * m..(i + 1) * k * m], k, m).t(),
                                &mut ga[i * n * k..(i + 1) * n * k],
                                0.0,
                            );
                        }
                        send(*a, ga, &mut grads);
                    }
                    if rg(*b) {
                        let mut gb = vec![0.0; batch * k * m];
                        for i in 0..batch {
                            gemm(
                                Mat::row_major(&ad[i * n * k..(i + 1) * n * k], n, k).t(),
                                Mat::row_major(&g[i * n * m..(i + 1) * n * m], n, m),
                                &mut gb[i * k * m..(i + 1) * k * m],
                                0.0,
                            );
                        }
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    if let Some(b) = b.filter(|&b| rg(b)) {
                        let plane = geom.out_h * geom.out_w;
                        let mut gb = vec![0.0; geom.out_c];
                        for (i, chunk) in g.chunks(plane).enumerate() {
                            gb[i % geom.out_c] += chunk.iter().sum::<f64>();
                        }
                        send(b, gb, &mut grads);
                    }
                    let (gx, gw) = conv::backward(geom, &g, val(*w), cols, rg(*x), rg(*w));
                    if let Some(gx) = gx {
                        send(*x, gx, &mut grads);
                    }
                    if let Some(gw) = gw {
                        send(*w, gw, &mut grads);
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    let mut gx = vec![0.0; val(*x).len()];
                    for (gv, &src) in g.iter().zip(argmax) {
                        gx[src] += gv;
                    }
                    send(*x, gx, &mut grads);
                }
                Op::Resize { x, plan } => {
                    let mut gx = vec![0.0; val(*x).len()];
                    plan.backward(&g, &mut gx);
                    send(*x, gx, &mut grads);
                }
                Op::Softmax { x, outer, len, inner } => {
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..*len).map(|l| g[at(l)] * out[at(l)]).sum();
                            for l in 0..*len {
                                gx[at(l)] = out[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::LogSoftmax { x, outer, len, inner } => {
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let total: f64 = (0..*len).map(|l| g[at(l)]).sum();
                            for l in 0..*len {
                                gx[at(l)] = g[at(l)] - out[at(l)].exp() * total;
                            }
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let s = g[0] / b as f64;
                    let mut gx: Vec<f64> = probs.iter().map(|p| p * s).collect();
                    for (row, &l) in labels.iter().enumerate() {
                        gx[row * k + l] -= s;
                    }
                    send(*logits, gx, &mut grads);
                }
                Op::Normalize { x, len, norms } => {
                    let len = *len;
                    let xd = val(*x);
                    let mut gx = vec![0.0; g.len()];
                    for (r, &n) in norms.iter().enumerate() {
                        let span = r * len..(r + 1) * len;
                        let (gr, yr) = (&g[span.clone()], &out[span.clone()]);
                        let raw = xd[span.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                        if raw > NORM_EPS {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for (o, (gv, yv)) in gx[span].iter_mut().zip(gr.iter().zip(yr)) {
                                *o = (gv - yv * dot) / n;
                            }
                        } else {
                            for (o, gv) in gx[span].iter_mut().zip(gr) {
                                *o = gv / n;
                            }
                        }
                    }
                    send(*x, gx, &mut grads);
                }
            }
        }

        for (i, g) in leaf_grads {
            add_into(&mut self.nodes[i].grad, &g);
        }
        Ok(())
    }
}
