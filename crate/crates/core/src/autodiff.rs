//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep. Graphs
//! are single-threaded; independent graphs over a shared `&ParamStore` can be
//! built on different threads.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const L2_NORM_EPS: f64 = 1e-8;
const TARGET_SUM_TOL: f64 = 1e-5;
/// Denominator floor for relative gradient errors. Entries smaller than this
/// are compared in absolute terms, which keeps finite-difference round-off
/// on near-zero gradients from dominating the check.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax {
        x: Var,
        temperature: f64,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        target: Tensor,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    flops: u64,
    param_vars: Vec<Option<Var>>,
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// For each flat index of `out`, the flat index of the broadcast source.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let offset = n - src.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Reduces a gradient of broadcast shape back onto `src` shape.
fn unbroadcast(grad: &[f64], src: &[usize], out: &[usize]) -> Vec<f64> {
    if src == out {
        return grad.to_vec();
    }
    let numel: usize = src.iter().product();
    let mut acc = vec![0.0; numel];
    for (g, &j) in grad.iter().zip(&broadcast_map(src, out)) {
        acc[j] += g;
    }
    acc
}

fn split_rows(shape: &[usize]) -> (usize, usize) {
    let w = shape.last().copied().unwrap_or(1);
    let rows = if w == 0 {
        0
    } else {
        shape.iter().product::<usize>() / w
    };
    (rows, w)
}

/// C[m,n] += A[m,k] · B[k,n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cv, bv) in ci.iter_mut().zip(bp) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,k] += A[m,n] · B[k,n]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let ai = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            c[i * k + p] += ai.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let cp = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in cp.iter_mut().zip(bi) {
                *cv += av * bv;
            }
        }
    }
}

struct MatmulDims {
    batch: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let a_batch = a[..a.len() - 2].to_vec();
    let b_batch = b[..b.len() - 2].to_vec();
    let batch =
        broadcast_shape("matmul", &a_batch, &b_batch).map_err(|_| Error::shape("matmul", a, b))?;
    Ok(MatmulDims {
        batch,
        a_batch,
        b_batch,
        m,
        k,
        n,
    })
}

/// Numerically stable softmax along the last axis of `x / temperature`.
/// `exclude` marks entries removed from the support; they come out as
/// exactly zero and the max used for stabilization is taken over the
/// remaining support only.
pub fn softmax_rows_values(
    x: &Tensor,
    temperature: f64,
    exclude: Option<&[bool]>,
) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if let Some(m) = exclude {
        if m.len() != x.numel() {
            return Err(Error::shape("softmax_rows", x.shape(), &[m.len()]));
        }
    }
    let (rows, w) = split_rows(x.shape());
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let xr = &x.data()[r * w..(r + 1) * w];
        let keep = |j: usize| exclude.map_or(true, |m| !m[r * w + j]);
        let mut max = f64::NEG_INFINITY;
        let mut support = false;
        for (j, &v) in xr.iter().enumerate() {
            if keep(j) {
                support = true;
                if v.is_nan() {
                    max = f64::NAN;
                } else if v > max {
                    max = v;
                }
            }
        }
        if !support {
            return Err(Error::DegenerateRow { row: r });
        }
        let or = &mut out[r * w..(r + 1) * w];
        if !max.is_finite() {
            // Non-finite logits poison the row; callers detect it downstream.
            or.fill(f64::NAN);
            continue;
        }
        let mut total = 0.0;
        for (j, &v) in xr.iter().enumerate() {
            if keep(j) {
                let e = ((v - max) / temperature).exp();
                or[j] = e;
                total += e;
            }
        }
        for v in or.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape(), out)
}

fn log_softmax_values(x: &[f64], w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(w).zip(out.chunks_mut(w)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for (o, v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    out
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

    /// Floating-point operations executed by the forward pass so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a parameter. Repeated calls return the same node, so a
    /// graph must only ever see one `ParamStore`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(op, &sa, &sb)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&sa, &out_shape);
            let mb = broadcast_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(xa[i], xb[j])).collect()
        };
        self.flops += data.len() as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, data)?, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        self.flops += value.numel() as u64;
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |e| e * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |e| e + c, Op::Shift(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |e| 1.0 / (1.0 + (-e).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Batched matrix product with broadcasting over leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = matmul_dims(self.shape(a), self.shape(b))?;
        let nb: usize = d.batch.iter().product();
        let ma = broadcast_map(&d.a_batch, &d.batch);
        let mb = broadcast_map(&d.b_batch, &d.batch);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let (m, k, n) = (d.m, d.k, d.n);
        let mut out = vec![0.0; nb * m * n];
        for bi in 0..nb {
            let (ia, ib) = (ma[bi], mb[bi]);
            gemm_nn(
                &xa[ia * m * k..(ia + 1) * m * k],
                &xb[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.flops += (2 * nb * m * k * n) as u64;
        let mut shape = d.batch.clone();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Matmul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose needs at least 2 axes, got {s:?}"
            )));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let nb = s[..s.len() - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..nb {
            let o = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = src[o + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| {
                Error::InvalidArgument("concat of zero tensors".into())
            })?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for {first:?}"
            )));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let a = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} on axis {axis} of {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&d[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.flops += self.value(x).numel() as u64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.flops += v.numel() as u64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum along `axis`, keeping it as an extent-1 axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "sum axis {axis} out of range for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..s[axis] {
                let src = &d[(o * s[axis] + a) * inner..(o * s[axis] + a + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        self.flops += d.len() as u64;
        let mut shape = s;
        shape[axis] = 1;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).ok_or_else(|| {
            Error::InvalidArgument(format!("mean axis {axis} out of range"))
        })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Softmax along the last axis of `x / temperature`; `exclude` marks
    /// entries removed from the support.
    pub fn softmax_rows(
        &mut self,
        x: Var,
        temperature: f64,
        exclude: Option<&[bool]>,
    ) -> Result<Var> {
        let y = softmax_rows_values(self.value(x), temperature, exclude)?;
        self.flops += 4 * y.numel() as u64;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Softmax { x, temperature }, rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (_, w) = split_rows(v.shape());
        let y = Tensor::new(v.shape(), log_softmax_values(v.data(), w)).expect("same shape");
        self.flops += 4 * y.numel() as u64;
        let rg = self.rg(&[x]);
        self.push(y, Op::LogSoftmax(x), rg)
    }

    /// Layer normalization over the last axis with affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (rows, d) = split_rows(&s);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &s, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xr = &xv[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xr[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.flops += 8 * xv.len() as u64;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `x / (‖x‖ + 1e-8)` per row of the last axis.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, w) = split_rows(v.shape());
        let mut norms = Vec::with_capacity(rows);
        let mut out = v.data().to_vec();
        for r in out.chunks_mut(w.max(1)).take(rows) {
            let n = r.iter().map(|e| e * e).sum::<f64>().sqrt();
            norms.push(n);
            r.iter_mut().for_each(|e| *e /= n + L2_NORM_EPS);
        }
        let y = Tensor::new(v.shape(), out).expect("same shape");
        self.flops += 3 * y.numel() as u64;
        let rg = self.rg(&[x]);
        self.push(y, Op::L2Normalize { x, norms }, rg)
    }

    /// Mean over rows of `-Σ_j target_j · log_softmax(logits)_j`.
    /// Zero target entries contribute exactly zero.
    pub fn cross_entropy_rows(&mut self, target: &Tensor, logits: Var) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if target.shape() != s.as_slice() {
            return Err(Error::shape("cross_entropy_rows", target.shape(), &s));
        }
        let (rows, w) = split_rows(&s);
        for r in 0..rows {
            let tr = &target.data()[r * w..(r + 1) * w];
            let sum: f64 = tr.iter().sum();
            if tr.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > TARGET_SUM_TOL
            {
                return Err(Error::TargetNotNormalized { row: r, sum });
            }
        }
        let logp = log_softmax_values(self.value(logits).data(), w);
        let mut loss = 0.0;
        for (t, lp) in target.data().iter().zip(&logp) {
            if *t != 0.0 {
                loss -= t * lp;
            }
        }
        loss /= rows as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        self.flops += 6 * logp.len() as u64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target: target.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error between `pred` and `target`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape("mse", self.shape(pred), self.shape(target)));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// parameter leaf reachable from `loss`, summed over repeated uses.
    pub fn gradients(&self, loss: Var, num_params: usize) -> Result<Gradients> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss { shape: ls.to_vec() });
        }
        let mut out = Gradients::empty(num_params);
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    /// Runs [`Graph::gradients`] and adds the result to the accumulators in
    /// `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let g = self.gradients(loss, store.len())?;
        store.accumulate(&g);
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let out_shape = node.value.shape();
        let y = node.value.data();

        match &node.op {
            Op::Constant => {}
            Op::Param(id) => out.add(*id, g),
            Op::Add(a, b) => {
                send(*a, unbroadcast(g, shp(*a), out_shape));
                send(*b, unbroadcast(g, shp(*b), out_shape));
            }
            Op::Sub(a, b) => {
                send(*a, unbroadcast(g, shp(*a), out_shape));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                send(*b, unbroadcast(&neg, shp(*b), out_shape));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (sa, sb) = (shp(*a), shp(*b));
                let ma = broadcast_map(sa, out_shape);
                let mb = broadcast_map(sb, out_shape);
                let (xa, xb) = (val(*a), val(*b));
                if self.nodes[a.0].requires_grad {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&mb)
                        .map(|(gv, &j)| if is_div { gv / xb[j] } else { gv * xb[j] })
                        .collect();
                    send(*a, unbroadcast(&ga, sa, out_shape));
                }
                if self.nodes[b.0].requires_grad {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(ma.iter().zip(&mb))
                        .map(|(gv, (&i, &j))| {
                            if is_div {
                                -gv * xa[i] / (xb[j] * xb[j])
                            } else {
                                gv * xa[i]
                            }
                        })
                        .collect();
                    send(*b, unbroadcast(&gb, sb, out_shape));
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::Shift(x) => send(*x, g.to_vec()),
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid(x) => send(*x, g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect()),
            Op::Tanh(x) => send(*x, g.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect()),
            Op::Exp(x) => send(*x, g.iter().zip(y).map(|(gv, e)| gv * e).collect()),
            Op::Matmul(a, b) => {
                let d = matmul_dims(shp(*a), shp(*b)).expect("validated in forward");
                let (m, k, n) = (d.m, d.k, d.n);
                let nb: usize = d.batch.iter().product();
                let ma = broadcast_map(&d.a_batch, &d.batch);
                let mb = broadcast_map(&d.b_batch, &d.batch);
                let (xa, xb) = (val(*a), val(*b));
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; xa.len()];
                    for bi in 0..nb {
                        let (ia, ib) = (ma[bi], mb[bi]);
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &xb[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; xb.len()];
                    for bi in 0..nb {
                        let (ia, ib) = (ma[bi], mb[bi]);
                        gemm_tn(
                            &xa[ia * m * k..(ia + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    send(*b, gb);
                }
            }
            Op::Transpose(x) => {
                let s = out_shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let nb = g.len() / (r * c).max(1);
                let mut gx = vec![0.0; g.len()];
                for b in 0..nb {
                    let o = b * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            gx[o + j * r + i] = g[o + i * c + j];
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Concat(xs, axis) => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let a = shp(v)[*axis];
                    let mut gx = Vec::with_capacity(outer * a * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[base..base + a * inner]);
                    }
                    offset += a;
                    send(v, gx);
                }
            }
            Op::Slice { x, axis, start } => {
                let s = shp(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                send(*x, gx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(x, axis) => {
                let s = shp(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut gx = Vec::with_capacity(val(*x).len());
                for o in 0..outer {
                    for _ in 0..s[*axis] {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(*x, gx);
            }
            Op::Softmax { x, temperature } => {
                let (_, w) = split_rows(out_shape);
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), or) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        or[j] = yr[j] * (gr[j] - dot) / temperature;
                    }
                }
                send(*x, gx);
            }
            Op::LogSoftmax(x) => {
                let (_, w) = split_rows(out_shape);
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), or) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..w {
                        or[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, d) = split_rows(out_shape);
                let gn = val(*gain);
                if self.nodes[gain.0].requires_grad || self.nodes[bias.0].requires_grad {
                    let mut gg = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                            gbias[j] += g[r * d + j];
                        }
                    }
                    send(*gain, gg);
                    send(*bias, gbias);
                }
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gn).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    send(*x, gx);
                }
            }
            Op::L2Normalize { x, norms } => {
                let (_, w) = split_rows(out_shape);
                let xv = val(*x);
                let mut gx = vec![0.0; g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let s = n + L2_NORM_EPS;
                    let xr = &xv[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let coef = if n > 0.0 { dot / (n * s * s) } else { 0.0 };
                    for j in 0..w {
                        gx[r * w + j] = gr[j] / s - xr[j] * coef;
                    }
                }
                send(*x, gx);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let (rows, w) = split_rows(target.shape());
                let scale = g[0] / rows as f64;
                let t = target.data();
                let mut gx = vec![0.0; t.len()];
                for r in 0..rows {
                    let tr = &t[r * w..(r + 1) * w];
                    let mass: f64 = tr.iter().sum();
                    for j in 0..w {
                        gx[r * w + j] = scale * (probs[r * w + j] * mass - tr[j]);
                    }
                }
                send(*logits, gx);
            }
        }
    }
}

/// Central finite-difference gradient of `f` with respect to every scalar
/// of every parameter in `store`.
pub fn finite_diff_grad<F>(store: &ParamStore, eps: f64, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.value(id).numel();
        let mut g = Tensor::zeros(store.value(id).shape());
        for i in 0..n {
            let orig = store.value(id).data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = f(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = f(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Relative error used by every gradient check in this crate:
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst-case comparison of analytic gradients against a finite-difference
/// reference, parameter by parameter.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

pub fn compare_gradients(
    store: &ParamStore,
    analytic: &Gradients,
    numeric: &[Tensor],
    floor: f64,
) -> GradCheck {
    let mut check = GradCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    for (id, num) in store.ids().zip(numeric) {
        let ana = analytic.get(id);
        for (i, &n) in num.data().iter().enumerate() {
            let a = ana.map_or(0.0, |g| g[i]);
            let e = relative_error(a, n, floor);
            check.checked += 1;
            if e > check.max_rel_err {
                check.max_rel_err = e;
                check.worst_param = store.get(id).name.clone();
                check.worst_index = i;
                check.worst_analytic = a;
                check.worst_numeric = n;
            }
        }
    }
    check
}

/// Runs `build` once for analytic gradients and `2·n` more times for central
/// differences. `build` must return a scalar loss.
pub fn grad_check<F>(store: &ParamStore, eps: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&ParamStore) -> Result<(Graph, Var)>,
{
    let (g, loss) = build(store)?;
    let analytic = g.gradients(loss, store.len())?;
    drop(g);
    let numeric = finite_diff_grad(store, eps, |s| {
        let (g, l) = build(s)?;
        Ok(g.value(l).item())
    })?;
    Ok(compare_gradients(store, &analytic, &numeric, GRAD_CHECK_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Checks d(sum(w ⊙ f(params)))/d(params) against central differences.
    fn fd_check<F>(store: &ParamStore, tol: f64, f: F)
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    {
        let weights = |g: &mut Graph, out: Var| -> Var {
            let n = g.value(out).numel();
            let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 7 % 11) as f64 / 11.0)).collect();
            let wv = g.constant(Tensor::new(g.shape(out), w).unwrap());
            let p = g.mul(out, wv).unwrap();
            g.sum(p)
        };
        let mut g = Graph::new();
        let out = f(&mut g, store).unwrap();
        let loss = weights(&mut g, out);
        let analytic = g.gradients(loss, store.len()).unwrap();
        let numeric = finite_diff_grad(store, 1e-5, |s| {
            let mut g = Graph::new();
            let out = f(&mut g, s)?;
            let l = weights(&mut g, out);
            Ok(g.value(l).item())
        })
        .unwrap();
        let check = compare_gradients(store, &analytic, &numeric, GRAD_CHECK_FLOOR);
        assert!(
            check.max_rel_err < tol,
            "rel err {} at {}[{}]: analytic {} vs numeric {}",
            check.max_rel_err,
            check.worst_param,
            check.worst_index,
            check.worst_analytic,
            check.worst_numeric
        );
    }

    fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            s.register(*name, Tensor::randn(shape, 1.0, &mut rng)).unwrap();
        }
        s
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = g.matmul(r, col).unwrap();
        assert_eq!(g.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transpose() {
        let store = random_store(&[("a", &[3, 4]), ("b", &[4, 2])], 1);
        let mut g = Graph::new();
        let a = g.param(&store, ParamId(0));
        let b = g.param(&store, ParamId(1));
        let c = g.matmul(a, b).unwrap();
        let l = g.sum(c);
        let grads = g.gradients(l, 2).unwrap();
        let bv = store.value(ParamId(1)).data();
        let ga = grads.get(ParamId(0)).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                assert_abs_diff_eq!(ga[i * 4 + p], bv[p * 2] + bv[p * 2 + 1], epsilon = 1e-12);
            }
        }
        fd_check(&store, 1e-6, |g, s| {
            let a = g.param(s, ParamId(0));
            let b = g.param(s, ParamId(1));
            g.matmul(a, b)
        });
    }

    #[test]
    fn batched_broadcast_matmul_gradients() {
        let store = random_store(&[("a", &[2, 3, 4]), ("b", &[4, 5])], 2);
        fd_check(&store, 1e-6, |g, s| {
            let a = g.param(s, ParamId(0));
            let b = g.param(s, ParamId(1));
            g.matmul(a, b)
        });
    }

    #[test]
    fn softmax_examples() {
        let x = t(&[1, 2], &[0.0, 1.0]);
        let y = softmax_rows_values(&x, 1.0, None).unwrap();
        assert_abs_diff_eq!(y.data()[0], 1.0 / (1.0 + 1f64.exp()), epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[0], 0.2689, epsilon = 1e-4);
        assert_abs_diff_eq!(y.data()[1], 0.7311, epsilon = 1e-4);

        let x = t(&[1, 2], &[0.5, -0.2]);
        let y = softmax_rows_values(&x, 1.0, Some(&[false, true])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);

        let y = softmax_rows_values(&t(&[1, 2], &[0.0, 1.0]), 0.075, None).unwrap();
        assert!(y.data()[1] > 0.999998);
    }

    #[test]
    fn softmax_all_masked_row_is_degenerate() {
        let x = t(&[2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let err = softmax_rows_values(&x, 1.0, Some(&[false, false, true, true])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
        assert!(softmax_rows_values(&x, 0.0, None).is_err());
    }

    #[test]
    fn softmax_gradients_with_mask() {
        let store = random_store(&[("x", &[3, 5])], 3);
        let mask: Vec<bool> = (0..15).map(|i| i % 4 == 1).collect();
        fd_check(&store, 1e-6, |g, s| {
            let x = g.param(s, ParamId(0));
            g.softmax_rows(x, 0.7, Some(&mask))
        });
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[2.5, 2.5, 2.5]));
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let expect = (1.0f64 / (1.0 + 1e-5)).sqrt();
        assert_abs_diff_eq!(g.value(y).data()[0], expect, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(y).data()[1], -expect, epsilon = 1e-15);
    }

    #[test]
    fn layer_norm_gradients() {
        let store = random_store(&[("x", &[4, 6]), ("g", &[6]), ("b", &[6])], 4);
        fd_check(&store, 1e-5, |g, s| {
            let x = g.param(s, ParamId(0));
            let gain = g.param(s, ParamId(1));
            let bias = g.param(s, ParamId(2));
            g.layer_norm(x, gain, bias)
        });
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1, 2], &[20.0, -20.0]));
        let l = g.cross_entropy_rows(&t(&[1, 2], &[1.0, 0.0]), z).unwrap();
        assert!(g.value(l).item() < 1e-8);

        let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = g.cross_entropy_rows(&t(&[1, 2], &[0.5, 0.5]), z).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 2f64.ln(), epsilon = 1e-12);

        let z = g.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]));
        let err = g
            .cross_entropy_rows(&t(&[2, 2], &[0.5, 0.5, 0.5, 0.6]), z)
            .unwrap_err();
        assert!(matches!(err, Error::TargetNotNormalized { row: 1, .. }));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_target() {
        let store = random_store(&[("z", &[3, 4])], 5);
        let target = t(
            &[3, 4],
            &[0.1, 0.2, 0.3, 0.4, 1.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.5, 0.0],
        );
        let mut g = Graph::new();
        let z = g.param(&store, ParamId(0));
        let l = g.cross_entropy_rows(&target, z).unwrap();
        let grads = g.gradients(l, 1).unwrap();
        let p = softmax_rows_values(store.value(ParamId(0)), 1.0, None).unwrap();
        for i in 0..12 {
            let expect = (p.data()[i] - target.data()[i]) / 3.0;
            assert_abs_diff_eq!(grads.get(ParamId(0)).unwrap()[i], expect, epsilon = 1e-12);
        }
        let numeric = finite_diff_grad(&store, 1e-5, |s| {
            let mut g = Graph::new();
            let z = g.param(s, ParamId(0));
            let l = g.cross_entropy_rows(&target, z)?;
            Ok(g.value(l).item())
        })
        .unwrap();
        assert!(compare_gradients(&store, &grads, &numeric, GRAD_CHECK_FLOOR).max_rel_err < 1e-6);
    }

    #[test]
    fn backward_examples() {
        let mut store = ParamStore::new();
        let p = store.register("p", t(&[3], &[0.3, -1.0, 2.0])).unwrap();
        let q = store.register("q", t(&[2], &[1.0, 2.0])).unwrap();
        let unused = store.register("unused", t(&[2], &[5.0, 5.0])).unwrap();

        let mut g = Graph::new();
        let pv = g.param(&store, p);
        let l = g.sum(pv);
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let qv = g.param(&store, q);
        let sq = g.mul(qv, qv).unwrap();
        let l = g.sum(sq);
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(q).grad.data(), &[2.0, 4.0]);
        assert_eq!(store.get(unused).grad.data(), &[0.0, 0.0]);

        let nonscalar = g.param(&store, q);
        assert!(matches!(
            g.backward(nonscalar, &mut store),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_twice_doubles() {
        let mut store = random_store(&[("a", &[3, 3]), ("b", &[3])], 6);
        let build = |g: &mut Graph, s: &ParamStore| {
            let a = g.param(s, ParamId(0));
            let b = g.param(s, ParamId(1));
            let h = g.add(a, b).unwrap();
            let h = g.tanh(h);
            let h = g.matmul(h, a).unwrap();
            g.mean(h)
        };
        let mut g = Graph::new();
        let l = build(&mut g, &store);
        g.backward(l, &mut store).unwrap();
        let once: Vec<f64> = store.iter().flat_map(|p| p.grad.data().to_vec()).collect();
        g.backward(l, &mut store).unwrap();
        let twice: Vec<f64> = store.iter().flat_map(|p| p.grad.data().to_vec()).collect();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn finite_diff_examples() {
        let mut store = ParamStore::new();
        store.register("theta", Tensor::scalar(3.0)).unwrap();
        let g = finite_diff_grad(&store, 1e-5, |s| Ok(s.value(ParamId(0)).item().powi(2))).unwrap();
        assert_abs_diff_eq!(g[0].item(), 6.0, epsilon = 1e-8);
        store.get_mut(ParamId(0)).value = Tensor::scalar(0.0);
        let g = finite_diff_grad(&store, 1e-5, |s| Ok(s.value(ParamId(0)).item().sin())).unwrap();
        assert_abs_diff_eq!(g[0].item(), 1.0, epsilon = 1e-9);
        assert!(finite_diff_grad(&store, 1e-2, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let store = random_store(
            &[("w1", &[4, 6]), ("b1", &[6]), ("w2", &[6, 3]), ("b2", &[3]), ("x", &[5, 4])],
            7,
        );
        let f = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
            let x = g.param(s, ParamId(4));
            let w1 = g.param(s, ParamId(0));
            let b1 = g.param(s, ParamId(1));
            let w2 = g.param(s, ParamId(2));
            let b2 = g.param(s, ParamId(3));
            let h = g.matmul(x, w1)?;
            let h = g.add(h, b1)?;
            let h = g.sigmoid(h);
            let h = g.matmul(h, w2)?;
            g.add(h, b2)
        };
        fd_check(&store, 1e-6, f);
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let store = random_store(&[("a", &[2, 3, 4]), ("b", &[3, 1]), ("c", &[4])], 8);
        fd_check(&store, 1e-5, |g, s| {
            let a = g.param(s, ParamId(0));
            let b = g.param(s, ParamId(1));
            let c = g.param(s, ParamId(2));
            let x = g.mul(a, b)?;
            let x = g.sub(x, c)?;
            let r = g.relu(x);
            let e = g.exp(c);
            let e = g.add_scalar(e, 1.0);
            let d = g.div(r, e)?;
            let t = g.transpose(d)?;
            let t = g.reshape(t, &[2, 12])?;
            let s0 = g.slice(t, 1, 2, 9)?;
            let s1 = g.slice(t, 1, 0, 3)?;
            let cat = g.concat(&[s0, s1], 1)?;
            let m = g.sum_axis(cat, 0)?;
            let n = g.mean_axis(cat, 1)?;
            let n = g.l2_normalize_rows(n);
            let prod = g.matmul(n, m)?;
            Ok(g.scale(prod, 0.5))
        });
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[3.0, 4.0, 0.0, 0.1, -0.2, 0.05]));
        let y = g.l2_normalize_rows(x);
        for r in 0..2 {
            let n: f64 = g.value(y).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn flops_count_matmul() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.flops(), 2 * 3 * 4 * 5);
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..4, 1..=4)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn softmax_rows_are_distributions(
            shape in shape_strategy(),
            seed in any::<u64>(),
            temp in 0.05f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&shape, 2.0, &mut rng);
            let w = *shape.last().unwrap();
            let mut mask: Vec<bool> = (0..x.numel()).map(|_| rng.gen_bool(0.3)).collect();
            for r in 0..x.numel() / w {
                mask[r * w] = false;
            }
            let y = softmax_rows_values(&x, temp, Some(&mask)).unwrap();
            for r in 0..x.numel() / w {
                let row = y.row(r);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for j in 0..w {
                    if mask[r * w + j] {
                        prop_assert_eq!(row[j], 0.0);
                    }
                }
            }
        }

        #[test]
        fn randomized_shapes_pass_gradient_checks(shape in shape_strategy(), seed in any::<u64>()) {
            let w = *shape.last().unwrap();
            let mut store = random_store(&[("x", &shape), ("g", &[w]), ("b", &[w]), ("y", &shape)], seed);
            // keep layer-norm rows away from zero variance
            for (i, v) in store.get_mut(ParamId(0)).value.data_mut().iter_mut().enumerate() {
                *v += (i % w) as f64;
            }
            // keep l2-normalized rows away from the singular zero-norm point
            for v in store.get_mut(ParamId(3)).value.data_mut() {
                *v = v.signum() * (0.5 + v.abs());
            }
            fd_check(&store, 1e-5, |g, s| {
                let x = g.param(s, ParamId(0));
                let gain = g.param(s, ParamId(1));
                let bias = g.param(s, ParamId(2));
                let y = g.param(s, ParamId(3));
                let h = g.layer_norm(x, gain, bias)?;
                let h = g.tanh(h);
                let p = g.mul(h, y)?;
                let p = g.add(p, bias)?;
                let sm = g.softmax_rows(p, 1.3, None)?;
                let n = g.l2_normalize_rows(y);
                let q = g.sigmoid(n);
                g.add(sm, q)
            });
        }

        #[test]
        fn ops_are_deterministic(seed in any::<u64>()) {
            let store = random_store(&[("a", &[4, 5]), ("b", &[5, 3])], seed);
            let run = || {
                let mut g = Graph::new();
                let a = g.param(&store, ParamId(0));
                let b = g.param(&store, ParamId(1));
                let c = g.matmul(a, b).unwrap();
                let s = g.softmax_rows(c, 0.5, None).unwrap();
                let l = g.mean(s);
                (g.value(s).clone(), g.gradients(l, 2).unwrap().get(ParamId(0)).unwrap().to_vec())
            };
            let (a, ga) = run();
            let (b, gb) = run();
            prop_assert_eq!(a, b);
            prop_assert_eq!(ga, gb);
        }
    }
}
