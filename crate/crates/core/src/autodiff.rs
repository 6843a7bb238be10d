//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape once in reverse. Nodes are created in dependency order, so
//! the tape is topologically sorted by construction.

use crate::error::{Error, Result};
use crate::tensor::{as_matrix, gemm_nn, gemm_nt_acc, gemm_tn_acc, Real, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Gelu,
    Exp,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Binary(Binary, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Unary, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    spent: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            spent: false,
        }
    }

    /// Drop all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.spent = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.shape(a));
        let (k2, n) = as_matrix(self.shape(b));
        if k != k2 || self.shape(a).len() > 2 || self.shape(b).len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Affine map `x·w + b` with the bias row added to every row of the product.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.shape(x));
        let (k2, n) = as_matrix(self.shape(w));
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        if self.value(b).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "linear(bias)",
                left: self.shape(w).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm_nn(m, k, n, self.value(x).data(), self.value(w).data(), &mut out, true);
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let na = self.value(a).numel();
        let nb = self.value(b).numel();
        let out_shape = if sa == sb || nb == 1 {
            sa.to_vec()
        } else if na == 1 {
            sb.to_vec()
        } else {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::Broadcast {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = na.max(nb);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<T> = (0..n)
            .map(|i| f(da[if na == 1 { 0 } else { i }], db[if nb == 1 { 0 } else { i }]))
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Binary(kind, a, b), rg))
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

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Tanh => |v| v.tanh(),
            Unary::Sigmoid => |v| v.sigmoid(),
            Unary::Gelu => gelu,
            Unary::Exp => |v| v.exp(),
            Unary::Square => |v| v * v,
        };
        let out = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Unary(kind, x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = as_matrix(self.shape(x));
        if start >= end || end > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: self.shape(x).to_vec(),
                right: vec![start, end],
            });
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, end)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::config("concat of nothing"))?;
        let (m, _) = as_matrix(self.shape(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = as_matrix(self.shape(p));
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::vstack(&values)?;
        let rg = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::from_f64(t.numel() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Per-row normalization to zero mean and unit variance, followed by an
    /// elementwise gain and bias (each of row width).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.shape(x));
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let nf = T::from_f64(n as f64);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let inv = T::ONE / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mu) * inv;
                normalized.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. The tape is consumed: a second call
    /// without [`Tape::reset`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.spent {
            return Err(Error::StaleTape);
        }
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(nodes[a.0].value.shape());
                let (_, n) = as_matrix(nodes[b.0].value.shape());
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm_nt_acc(m, n, k, g, nodes[b.0].value.data(), ga);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm_tn_acc(k, m, n, nodes[a.0].value.data(), g, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = as_matrix(nodes[x.0].value.shape());
                let (_, n) = as_matrix(nodes[w.0].value.shape());
                if wants(*x) {
                    let gx = slot(grads, *x, m * k);
                    gemm_nt_acc(m, n, k, g, nodes[w.0].value.data(), gx);
                }
                if wants(*w) {
                    let gw = slot(grads, *w, k * n);
                    gemm_tn_acc(k, m, n, nodes[x.0].value.data(), g, gw);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, n);
                    for r in 0..m {
                        for (acc, &v) in gb.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                let (na, nb) = (va.len(), vb.len());
                let ia = |i: usize| if na == 1 { 0 } else { i };
                let ib = |i: usize| if nb == 1 { 0 } else { i };
                if wants(*a) {
                    let ga = slot(grads, *a, na);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ia(i)] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * vb[ib(i)],
                        };
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, nb);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[ib(i)] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * va[ia(i)],
                        };
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, g.len());
                for (acc, &v) in gx.iter_mut().zip(g) {
                    *acc += v * *c;
                }
            }
            Op::AddScalar(x) => {
                let gx = slot(grads, *x, g.len());
                for (acc, &v) in gx.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            Op::Unary(kind, x) => {
                let input = nodes[x.0].value.data();
                let output = node.value.data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Tanh => T::ONE - output[i] * output[i],
                        Unary::Sigmoid => output[i] * (T::ONE - output[i]),
                        Unary::Gelu => gelu_grad(input[i]),
                        Unary::Exp => output[i],
                        Unary::Square => T::from_f64(2.0) * input[i],
                    };
                    gx[i] += g[i] * d;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = as_matrix(nodes[x.0].value.shape());
                let w = node.value.cols();
                let gx = slot(grads, *x, m * n);
                for r in 0..m {
                    for j in 0..w {
                        gx[r * n + start + j] += g[r * w + j];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = nodes[x.0].value.cols();
                let len = nodes[x.0].value.numel();
                let gx = slot(grads, *x, len);
                for (acc, &v) in gx[start * n..].iter_mut().zip(g) {
                    *acc += v;
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if wants(*p) {
                        let gp = slot(grads, *p, m * w);
                        for r in 0..m {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    if wants(*p) {
                        let gp = slot(grads, *p, len);
                        for (acc, &v) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *acc += v;
                        }
                    }
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let len = nodes[x.0].value.numel();
                for acc in slot(grads, *x, len) {
                    *acc += g[0];
                }
            }
            Op::Mean(x) => {
                let len = nodes[x.0].value.numel();
                let share = g[0] / T::from_f64(len as f64);
                for acc in slot(grads, *x, len) {
                    *acc += share;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (m, n) = as_matrix(nodes[x.0].value.shape());
                let gv = nodes[gain.0].value.data();
                if wants(*gain) {
                    let gg = slot(grads, *gain, n);
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * normalized[r * n + j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, n);
                    for r in 0..m {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                }
                if wants(*x) {
                    let nf = T::from_f64(n as f64);
                    let gx = slot(grads, *x, m * n);
                    for r in 0..m {
                        let xh = &normalized[r * n..(r + 1) * n];
                        let dy = &g[r * n..(r + 1) * n];
                        let mut sum_d = T::ZERO;
                        let mut sum_dx = T::ZERO;
                        for j in 0..n {
                            let d = dy[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let scale = inv_std[r] / nf;
                        for j in 0..n {
                            let d = dy[j] * gv[j];
                            gx[r * n + j] += scale * (nf * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::ZERO; len])
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1/sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)` with the Gaussian CDF.
pub fn gelu<T: Real>(x: T) -> T {
    x * T::from_f64(0.5) * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp();
    cdf + x * pdf
}

/// Accumulated gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Raw gradient buffer, `None` when nothing flowed into `v`.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient shaped like the node it belongs to (zeros if nothing flowed).
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

/// Central finite-difference gradient oracle, independent of the reverse pass.
pub mod check {
    use super::*;

    /// Per-input relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.
    #[derive(Debug, Clone)]
    pub struct GradCheck {
        pub rel_errors: Vec<f64>,
    }

    impl GradCheck {
        pub fn max_rel_error(&self) -> f64 {
            self.rel_errors.iter().copied().fold(0.0, f64::max)
        }
    }

    /// Compare reverse-mode gradients of the scalar `f(inputs)` against
    /// central differences with the given step.
    pub fn gradcheck<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;

        let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
            let mut t = Tape::new();
            let vs: Vec<Var> = vals.iter().map(|x| t.constant(x.clone())).collect();
            let out = f(&mut t, &vs)?;
            Ok(t.value(out).data()[0])
        };

        let mut rel_errors = Vec::with_capacity(inputs.len());
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (idx, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(&tape, *var);
            let mut numeric = vec![0.0; inputs[idx].numel()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let orig = work[idx].data()[j];
                work[idx].data_mut()[j] = orig + step;
                let up = eval(&work)?;
                work[idx].data_mut()[j] = orig - step;
                let down = eval(&work)?;
                work[idx].data_mut()[j] = orig;
                *slot = (up - down) / (2.0 * step);
            }
            let diff: f64 = analytic
                .data()
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n) * (a - n))
                .sum::<f64>()
                .sqrt();
            let na = analytic.norm();
            let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
            rel_errors.push(diff / na.max(nn).max(1e-10));
        }
        Ok(GradCheck { rel_errors })
    }
}

#[cfg(test)]
mod tests {
    use super::check::gradcheck;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 2.0, &mut rng)
    }

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-5;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(rand_t(&[3, 4], 1));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(&tape, x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn squared_norm_gradient_is_twice_input() {
        let x0 = rand_t(&[5], 2);
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        for (gi, xi) in g.wrt(&tape, x).data().iter().zip(x0.data()) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transpose() {
        let a = rand_t(&[5, 7], 3);
        let b = rand_t(&[7, 3], 4);
        let mut tape = Tape::new();
        let va = tape.param(a);
        let vb = tape.constant(b.clone());
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap().wrt(&tape, va);
        let expected = Tensor::<f64>::full(&[5, 3], 1.0);
        let mut bt = vec![0.0; 21];
        for i in 0..7 {
            for j in 0..3 {
                bt[j * 7 + i] = b.data()[i * 3 + j];
            }
        }
        let want = expected.matmul(&Tensor::new(vec![3, 7], bt).unwrap()).unwrap();
        for (x, y) in g.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let fd = gradcheck(&[rand_t(&[5, 7], 3), rand_t(&[7, 3], 4)], STEP, |t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum(c))
        })
        .unwrap();
        assert!(fd.max_rel_error() < 1e-6, "{fd:?}");
    }

    #[test]
    fn tanh_and_gelu_vanish_at_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let t = tape.tanh(z);
        let g = tape.gelu(z);
        assert_eq!(tape.value(t).data()[0], 0.0);
        assert_eq!(tape.value(g).data()[0], 0.0);
    }

    #[test]
    fn sigmoid_gradient_matches_closed_form() {
        for &x in &[-2.0f64, 0.0, 2.0] {
            let mut tape = Tape::new();
            let v = tape.param(Tensor::scalar(x));
            let s = tape.sigmoid(v);
            let l = tape.sum(s);
            let g = tape.backward(l).unwrap().wrt(&tape, v).data()[0];
            let sig = 1.0 / (1.0 + (-x).exp());
            assert!((g - sig * (1.0 - sig)).abs() < 1e-14);
            let fd = gradcheck(&[Tensor::scalar(x)], STEP, |t, v| {
                let s = t.sigmoid(v[0]);
                Ok(t.sum(s))
            })
            .unwrap();
            assert!(fd.max_rel_error() < TOL);
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("add", vec![vec![3, 4], vec![3, 4]], |t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("sub-scalar-broadcast", vec![vec![3, 4], vec![1]], |t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| {
                let y = t.mul(v[0], v[1])?;
                Ok(t.sum(y))
            }),
            ("scalar-mul", vec![vec![1], vec![2, 2]], |t, v| {
                let y = t.mul(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.mean(y))
            }),
            ("tanh", vec![vec![4, 3]], |t, v| {
                let y = t.tanh(v[0]);
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("gelu", vec![vec![4, 3]], |t, v| {
                let y = t.gelu(v[0]);
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("exp", vec![vec![6]], |t, v| {
                let y = t.exp(v[0]);
                Ok(t.mean(y))
            }),
            ("scale-add-scalar", vec![vec![6]], |t, v| {
                let y = t.scale(v[0], 1.7);
                let y = t.add_scalar(y, -0.3);
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("linear", vec![vec![4, 3], vec![3, 5], vec![1, 5]], |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            }),
            ("slice-concat", vec![vec![3, 6], vec![3, 2]], |t, v| {
                let a = t.slice_cols(v[0], 1, 4)?;
                let b = t.concat_cols(&[v[1], a])?;
                let r = t.slice_rows(b, 1, 3)?;
                let r2 = t.concat_rows(&[r, b])?;
                let y = t.sigmoid(r2);
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("layer-norm", vec![vec![4, 6], vec![6], vec![6]], |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                let y = t.tanh(y);
                let y = t.square(y);
                Ok(t.sum(y))
            }),
        ];
        for (i, (name, shapes, f)) in cases.into_iter().enumerate() {
            let inputs: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(j, s)| rand_t(s, 100 + 10 * i as u64 + j as u64))
                .collect();
            let r = gradcheck(&inputs, STEP, f).unwrap();
            assert!(r.max_rel_error() < TOL, "{name}: {r:?}");
        }
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(1.0));
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::StaleTape)));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::Broadcast { .. })));
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_t(&[5, 16], 9));
        let g = tape.constant(Tensor::full(&[16], 1.0));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for r in 0..5 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
    }

    #[test]
    fn grad_off_and_on_give_identical_values() {
        let a = rand_t(&[4, 3], 11);
        let w = rand_t(&[3, 2], 12);
        let run = |grad: bool| {
            let mut t = Tape::new();
            let va = t.leaf(a.clone(), grad);
            let vw = t.leaf(w.clone(), grad);
            let y = t.matmul(va, vw).unwrap();
            let y = t.gelu(y);
            t.value(y).clone()
        };
        assert_eq!(run(true), run(false));
    }
}
