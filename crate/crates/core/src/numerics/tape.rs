//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly, stores its output on the tape and records how
//! to push a cotangent back to its inputs. [`Tape::backward`] replays the
//! record in reverse. First order only.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    Gelu {
        a: Var,
        /// tanh of the inner argument, kept for the backward pass
        th: Vec<T>,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    MeanSquare {
        a: Var,
    },
    Sum {
        a: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::MeanSquare { .. } => "mean_square",
            Op::Sum { .. } => "sum",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; saturates cleanly for large `|z|`.
#[inline]
fn fast_tanh<T: Real>(z: T) -> T {
    let two = T::of(2.0);
    if z.abs() > T::of(15.0) {
        return z.signum();
    }
    let e = (two * z).exp();
    (e - T::one()) / (e + T::one())
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Per-axis strides of `small` when broadcast against `big` (right aligned);
/// broadcast axes get stride zero.
fn broadcast_strides(big: &[usize], small: &[usize]) -> Option<Vec<usize>> {
    if small.len() > big.len() {
        return None;
    }
    let offset = big.len() - small.len();
    let mut strides = vec![0; big.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        let (s, b) = (small[i], big[offset + i]);
        if s == b {
            strides[offset + i] = acc;
        } else if s != 1 {
            return None;
        }
        acc *= s;
    }
    Some(strides)
}

/// Visit rows of the last axis of `shape`, yielding `(row_index, offset)`
/// where offset is computed from `strides` over the leading axes.
fn for_each_row(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let lead = &shape[..shape.len().saturating_sub(1)];
    let rows = numel(lead);
    let mut idx = vec![0usize; lead.len()];
    let mut off = 0usize;
    for r in 0..rows {
        f(r, off);
        for ax in (0..lead.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < lead[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let last = out_shape.len() - 1;
    let (len, stride) = (out_shape[last], strides[last]);
    let mut out = Vec::with_capacity(data.len());
    for_each_row(&out_shape, &strides, |_, off| {
        for j in 0..len {
            out.push(data[off + j * stride]);
        }
    });
    (out, out_shape)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// `a[.., m, k] · b[k, n]`, with the leading axes of `a` flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k;
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// Batched product over matching leading axes: `a[.., m, k] · b[.., k, n]`,
    /// or `a · bᵀ` with `b[.., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let g = numel(&sa[..r - 2]);
        let mut out = vec![T::zero(); g * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..g {
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * k * n..(i + 1) * k * n];
                let ci = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt(ai, bi, ci, m, k, n);
                } else {
                    gemm_nn(ai, bi, ci, m, k, n);
                }
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Bmm {
                a,
                b,
                g,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        )
    }

    /// `a + b` with `b` broadcast (right-aligned, size-1 axes stretch) to `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let strides = broadcast_strides(&sa, &sb).ok_or_else(|| shape_err("add", &sa, &sb))?;
        let mut out = self.value(a).data().to_vec();
        if !sa.is_empty() {
            let last = sa.len() - 1;
            let (len, stride) = (sa[last], strides[last]);
            let bd = self.value(b).data();
            for_each_row(&sa, &strides, |r, off| {
                let row = &mut out[r * len..(r + 1) * len];
                if stride == 0 {
                    let v = bd[off];
                    row.iter_mut().for_each(|x| *x += v);
                } else {
                    row.iter_mut()
                        .zip(&bd[off..off + len])
                        .for_each(|(x, &v)| *x += v);
                }
            });
        } else {
            out[0] += self.value(b).data()[0];
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&sa, out)?, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b)).map_err(|_| {
            shape_err("sub", self.shape(a), self.shape(b))
        })?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub { a, b }, rg)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| shape_err("mul", self.shape(a), self.shape(b)))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, s }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let x = self.value(a);
        let th: Vec<T> = x.data().iter().map(|&x| fast_tanh(c * (x + k * x * x * x))).collect();
        let data = x.data().iter().zip(&th).map(|(&x, &t)| half * x * (T::one() + t)).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.rg(a);
        self.push(out, Op::Gelu { a, th }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = *x.shape().last().ok_or_else(|| Error::invalid("softmax of scalar"))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += v.f64();
            }
            let inv = T::of(1.0 / sum);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out)?, Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last axis with learned affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer norm epsilon must be positive"));
        }
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| Error::invalid("layer norm of scalar"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(shape_err("layer_norm", &sx, self.shape(p)));
            }
        }
        let rows = numel(&sx) / n;
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        {
            let (xd, gd, bd) = (
                self.value(x).data(),
                self.value(gamma).data(),
                self.value(beta).data(),
            );
            for r in 0..rows {
                let row = &xd[r * n..(r + 1) * n];
                let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = T::of(rs);
                for j in 0..n {
                    let h = T::of((row[j].f64() - mean) * rs);
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * gd[j] + bd[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(&sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape { a }, rg)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &sa, perm));
        }
        let (data, shape) = permute_data(self.value(a).data(), &sa, perm);
        let rg = self.rg(a);
        self.push(
            Tensor::new(&shape, data)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// `a[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(shape_err("slice", &sa, &[axis, start, len]));
        }
        let outer = numel(&sa[..axis]);
        let inner = numel(&sa[axis + 1..]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out)?, Op::Slice { a, axis, start }, rg)
    }

    /// Mean of squared entries, as a scalar.
    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let v = x.mean_sq();
        let rg = self.rg(a);
        self.push(Tensor::scalar(T::of(v)), Op::MeanSquare { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v: f64 = self.value(a).data().iter().map(|x| x.f64()).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(T::of(v)), Op::Sum { a }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::full(&seed_shape, T::one()).reshape(&seed_shape)?);
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                let shape = self.shape(v).to_vec();
                *slot = Some(if shape.is_empty() {
                    Tensor::scalar(delta[0])
                } else {
                    Tensor::new(&shape, delta)?
                });
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(gd, self.value(b).data(), &mut da, m, n, k);
                    self.accumulate(grads, a, da)?;
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(self.value(a).data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::Bmm {
                a,
                b,
                g: groups,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    let mut da = vec![T::zero(); groups * m * k];
                    for i in 0..groups {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            // b is [n, k]
                            gemm_nn(gi, bi, dai, m, n, k);
                        } else {
                            gemm_nt(gi, bi, dai, m, n, k);
                        }
                    }
                    self.accumulate(grads, a, da)?;
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); groups * k * n];
                    for i in 0..groups {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // d(bᵀ) = aᵀ·g, so d(b) = gᵀ·a : [n, k]
                            gemm_tn(gi, ai, dbi, m, n, k);
                        } else {
                            gemm_tn(ai, gi, dbi, m, k, n);
                        }
                    }
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::Add { a, b } => {
                if self.rg(a) {
                    self.accumulate(grads, a, gd.to_vec())?;
                }
                if self.rg(b) {
                    let sa = self.shape(a);
                    let sb = self.shape(b);
                    let mut db = vec![T::zero(); numel(sb)];
                    if sa.is_empty() {
                        db[0] += gd[0];
                    } else {
                        let strides = broadcast_strides(sa, sb).expect("checked in forward");
                        let last = sa.len() - 1;
                        let (len, stride) = (sa[last], strides[last]);
                        for_each_row(sa, &strides, |r, off| {
                            let row = &gd[r * len..(r + 1) * len];
                            if stride == 0 {
                                let s = row.iter().map(|x| x.f64()).sum::<f64>();
                                db[off] += T::of(s);
                            } else {
                                db[off..off + len]
                                    .iter_mut()
                                    .zip(row)
                                    .for_each(|(d, &x)| *d += x);
                            }
                        });
                    }
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, gd.to_vec())?;
                self.accumulate(grads, b, gd.iter().map(|&x| -x).collect())?;
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    self.accumulate(grads, a, gd.iter().zip(bd).map(|(&x, &y)| x * y).collect())?;
                }
                if self.rg(b) {
                    self.accumulate(grads, b, gd.iter().zip(ad).map(|(&x, &y)| x * y).collect())?;
                }
            }
            &Op::Scale { a, s } => {
                self.accumulate(grads, a, gd.iter().map(|&x| x * s).collect())?;
            }
            Op::Gelu { a, th } => {
                let a = *a;
                let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                let (half, three) = (T::of(0.5), T::of(3.0));
                let xs = self.value(a).data();
                let d = xs
                    .iter()
                    .zip(gd)
                    .zip(th)
                    .map(|((&x, &gy), &th)| {
                        let dx = half * (T::one() + th)
                            + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
                        gy * dx
                    })
                    .collect();
                self.accumulate(grads, a, d)?;
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks_exact(n).zip(gd.chunks_exact(n)).zip(d.chunks_exact_mut(n)) {
                    let s: f64 = yr.iter().zip(gr).map(|(p, q)| p.f64() * q.f64()).sum();
                    let s = T::of(s);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, a, d)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                let rows = rstd.len();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0f64; n];
                    let mut dbeta = vec![0.0f64; n];
                    for r in 0..rows {
                        for j in 0..n {
                            let gy = gd[r * n + j].f64();
                            dg[j] += gy * xhat[r * n + j].f64();
                            dbeta[j] += gy;
                        }
                    }
                    self.accumulate(grads, *gamma, dg.into_iter().map(T::of).collect())?;
                    self.accumulate(grads, *beta, dbeta.into_iter().map(T::of).collect())?;
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * n];
                    let mut dxh = vec![0.0f64; n];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let v = gd[r * n + j].f64() * gam[j].f64();
                            dxh[j] = v;
                            m1 += v;
                            m2 += v * xhat[r * n + j].f64();
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        let rs = rstd[r].f64();
                        for j in 0..n {
                            dx[r * n + j] = T::of(rs * (dxh[j] - m1 - xhat[r * n + j].f64() * m2));
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
            }
            &Op::Reshape { a } => {
                self.accumulate(grads, a, gd.to_vec())?;
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (d, _) = permute_data(gd, g.shape(), &inv);
                self.accumulate(grads, *a, d)?;
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&gd[base..base + chunk]);
                        }
                        self.accumulate(grads, p, d)?;
                    }
                    offset += chunk;
                }
            }
            &Op::Slice { a, axis, start } => {
                let sa = self.shape(a);
                let len = node.value.shape()[axis];
                let outer = numel(&sa[..axis]);
                let inner = numel(&sa[axis + 1..]);
                let mut d = vec![T::zero(); numel(sa)];
                for o in 0..outer {
                    let base = (o * sa[axis] + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, a, d)?;
            }
            &Op::MeanSquare { a } => {
                let x = self.value(a);
                let c = T::of(2.0 / x.len() as f64) * gd[0];
                self.accumulate(grads, a, x.data().iter().map(|&v| v * c).collect())?;
            }
            &Op::Sum { a } => {
                let n = self.value(a).len();
                self.accumulate(grads, a, vec![gd[0]; n])?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_by_hand() {
        // (x - 2) / sqrt(2/3 + eps)
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let g = tape.constant(t(&[3], &[1.0; 3])).unwrap();
        let b = tape.constant(t(&[3], &[0.0; 3])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let want = [-1.224_744_871, 0.0, 1.224_744_871];
        for (v, w) in tape.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-8, "{v} vs {w}");
        }
    }

    #[test]
    fn linear_map_gradient_rows_equal_input() {
        // loss = sum(x · W) with x [1,3], W [3,4]: dW[p, j] = x[p]
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[1.0, -2.0, 0.5])).unwrap();
        let w = tape.param(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1)).unwrap();
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dw = grads.get(w).unwrap();
        for p in 0..3 {
            for j in 0..4 {
                assert_eq!(dw.data()[p * 4 + j], [1.0, -2.0, 0.5][p]);
            }
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::<f64>::new();
        let xv = t(&[4], &[0.3, -1.0, 2.0, 0.0]);
        let x = tape.param(xv.clone()).unwrap();
        // ||x||²/2 = mean_square(x) * n / 2
        let ms = tape.mean_square(x).unwrap();
        let loss = tape.scale(ms, 2.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &xv);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn rejects_non_scalar_loss_and_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(tape.backward(x).is_err());
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[4, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 3]"));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::<f32>::new();
        assert!(tape.constant(Tensor::full(&[2], f32::NAN)).is_err());
        let x = tape.constant(Tensor::full(&[2], 3.0e38)).unwrap();
        assert!(tape.scale(x, 10.0).is_err());
    }

    #[test]
    fn broadcast_add_middle_axis() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2, 3, 2])).unwrap();
        let b = tape.param(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let c = tape.add(a, b).unwrap();
        assert_eq!(
            tape.value(c).data(),
            &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]
        );
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64)).unwrap();
        let p = tape.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // element [k, i, j] = a[i, j, k]
        assert_eq!(tape.value(p).data()[1 * 6 + 1 * 3 + 2], (1 * 12 + 2 * 4 + 1) as f64);
        let q = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(q), tape.value(a));
    }
}
