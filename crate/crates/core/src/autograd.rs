//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly: the forward value is computed
//! when the node is created, and [`Graph::backward`] walks the tape in reverse.
//! Parameters live in a [`ParamStore`] and enter a graph through
//! [`Graph::param`]; gradients are reported per parameter.
//!
//! Binary elementwise ops broadcast their right operand when its shape is a
//! suffix of the left operand's shape (bias vectors, positional tables).

use serde::{Deserialize, Serialize};

use crate::special::{digamma, ln_gamma, trigamma};
use crate::tensor::{gemm, gemm_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
    Exp,
    Ln,
    Recip,
    Neg,
    LogSigmoid,
    Softplus,
}

enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Gather { table: Var, indices: Vec<usize> },
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    Softmax { x: Var },
    TransposeLast2(Var),
    SumAxis(Var, usize),
    SelectAxis { x: Var, axis: usize, index: usize },
    Concat { a: Var, b: Var, axis: usize },
    Stack { parts: Vec<Var>, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BetaKl { at: Var, bt: Var, as_: Var, bs: Var },
    BceWithLogits { scores: Var, targets: Vec<usize>, clip: f64 },
    SoftmaxCe { scores: Var, targets: Vec<usize> },
    Mean(Var),
    Sum(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, n, inner) extents.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // ln σ(x) = -softplus(-x)
    -softplus(-x)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn erf(x: f64) -> f64 {
    statrs::function::erf::erf(x)
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn apply_unary(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Relu => x.max(0.0),
        Unary::Gelu => 0.5 * x * (1.0 + erf(x / SQRT_2)),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Recip => 1.0 / x,
        Unary::Neg => -x,
        Unary::LogSigmoid => log_sigmoid(x),
        Unary::Softplus => softplus(x),
    }
}

/// d(unary)/dx given input `x` and output `y`.
fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Gelu => 0.5 * (1.0 + erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp(),
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Recip => -y * y,
        Unary::Neg => -1.0,
        Unary::LogSigmoid => sigmoid(-x),
        Unary::Softplus => sigmoid(x),
    }
}

/// Elementwise KL(Beta(at, bt) ‖ Beta(as, bs)).
pub fn beta_kl_scalar(at: f64, bt: f64, as_: f64, bs: f64) -> f64 {
    let lnb_s = ln_gamma(as_) + ln_gamma(bs) - ln_gamma(as_ + bs);
    let lnb_t = ln_gamma(at) + ln_gamma(bt) - ln_gamma(at + bt);
    lnb_s - lnb_t
        + (at - as_) * digamma(at)
        + (bt - bs) * digamma(bt)
        + (as_ - at + bs - bt) * digamma(at + bt)
}

/// Partial derivatives of [`beta_kl_scalar`] w.r.t. (at, bt, as, bs).
pub fn beta_kl_grad(at: f64, bt: f64, as_: f64, bs: f64) -> [f64; 4] {
    let tt = at + bt;
    let ss = as_ + bs;
    let psi_tt = digamma(tt);
    let tri_tt = trigamma(tt);
    let shared = (as_ - at + bs - bt) * tri_tt;
    [
        (at - as_) * trigamma(at) + shared,
        (bt - bs) * trigamma(bt) + shared,
        digamma(as_) - digamma(ss) - digamma(at) + psi_tt,
        digamma(bs) - digamma(ss) - digamma(bt) + psi_tt,
    ]
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert!(
            is_suffix(av.shape(), bv.shape()),
            "cannot broadcast {:?} onto {:?}",
            bv.shape(),
            av.shape()
        );
        let bn = bv.len();
        let data = if bn == av.len() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            av.data()
                .chunks(bn)
                .flat_map(|c| c.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.broadcast_binary(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.broadcast_binary(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.broadcast_binary(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.broadcast_binary(a, b, |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = self.value(a).map(|x| apply_unary(kind, x));
        let ng = self.ng(a);
        self.push(out, Op::Unary(a, kind), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    /// Hard clamp; the gradient is zero wherever the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// `a[.., k] · b[k, n]`, or `a · bᵀ` for `b[n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-d");
        let k = av.last_dim();
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        assert_eq!(k, bk, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let m = av.rows();
        let data = gemm(av.data(), m, k, bv.data(), n, trans_b);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, data), Op::MatMul { a, b, trans_b }, ng)
    }

    /// Batched `a[B, m, k] · b[B, k, n]` (or `b[B, n, k]` transposed).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape().len(), 3);
        assert_eq!(bv.shape().len(), 3);
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], batch);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        assert_eq!(k, bk, "batch_matmul inner dims");
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let asl = &av.data()[i * m * k..(i + 1) * m * k];
            let bsl = &bv.data()[i * k * n..(i + 1) * k * n];
            data.extend(gemm(asl, m, k, bsl, n, trans_b));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(vec![batch, m, n], data),
            Op::BatchMatMul { a, b, trans_b },
            ng,
        )
    }

    /// Row lookup: `table[N, d]` indexed by `indices` gives `[lead.., d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize], lead: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.last_dim();
        let n = tv.rows();
        assert_eq!(lead.iter().product::<usize>(), indices.len());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < n, "gather index {i} out of range for {n} rows");
            data.extend_from_slice(tv.row(i));
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let ng = self.ng(table);
        self.push(
            Tensor::new(shape, data),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            ng,
        )
    }

    /// `[B, L, h·dh]` to `[B·h, L, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.value(x);
        let (b, l, hd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(hd % heads, 0);
        let dh = hd / heads;
        let mut data = vec![0.0; xv.len()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let src = (bi * l + li) * hd + h * dh;
                    let dst = ((bi * heads + h) * l + li) * dh;
                    data[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![b * heads, l, dh], data),
            Op::SplitHeads(x, heads),
            ng,
        )
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.value(x);
        let (bh, l, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let b = bh / heads;
        let hd = heads * dh;
        let mut data = vec![0.0; xv.len()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let dst = (bi * l + li) * hd + h * dh;
                    let src = ((bi * heads + h) * l + li) * dh;
                    data[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![b, l, hd], data),
            Op::MergeHeads(x, heads),
            ng,
        )
    }

    /// Softmax over the last axis. Entries with `mask == false` get weight 0;
    /// every row must keep at least one entry.
    pub fn softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        if let Some(m) = &mask {
            assert_eq!(m.len(), xv.len());
        }
        let mut data = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * d + j]);
            let mx = (0..d)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(mx > f64::NEG_INFINITY, "softmax row {r} fully masked");
            let mut total = 0.0;
            for j in 0..d {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    data[r * d + j] = e;
                    total += e;
                }
            }
            for v in &mut data[r * d..(r + 1) * d] {
                *v /= total;
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data), Op::Softmax { x }, ng)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let nd = xv.shape().len();
        let (m, n) = (xv.shape()[nd - 2], xv.shape()[nd - 1]);
        let batch = xv.len() / (m * n);
        let mut data = vec![0.0; xv.len()];
        for b in 0..batch {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    data[base + j * m + i] = xv.data()[base + i * n + j];
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.swap(nd - 2, nd - 1);
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data), Op::TransposeLast2(x), ng)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let (outer, n, inner) = split_at_axis(xv.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xv.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data), Op::SumAxis(x, axis), ng)
    }

    /// Picks slice `index` along `axis`, removing the axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Var {
        let xv = self.value(x);
        let (outer, n, inner) = split_at_axis(xv.shape(), axis);
        assert!(index < n);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * n + index) * inner;
            data.extend_from_slice(&xv.data()[start..start + inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data), Op::SelectAxis { x, axis, index }, ng)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape().len(), bv.shape().len());
        for (i, (x, y)) in av.shape().iter().zip(bv.shape()).enumerate() {
            assert!(i == axis || x == y, "concat shape mismatch {:?} {:?}", av.shape(), bv.shape());
        }
        let (outer, na, inner) = split_at_axis(av.shape(), axis);
        let nb = bv.shape()[axis];
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av.data()[o * na * inner..(o + 1) * na * inner]);
            data.extend_from_slice(&bv.data()[o * nb * inner..(o + 1) * nb * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = na + nb;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, data), Op::Concat { a, b, axis }, ng)
    }

    /// Stacks equally shaped tensors along a new `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Var {
        let shape0 = self.value(parts[0]).shape().to_vec();
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis..].iter().product();
        let n = parts.len();
        let mut data = vec![0.0; outer * n * inner];
        for (p, &v) in parts.iter().enumerate() {
            let pv = self.value(v);
            assert_eq!(pv.shape(), &shape0[..]);
            for o in 0..outer {
                data[(o * n + p) * inner..(o * n + p + 1) * inner]
                    .copy_from_slice(&pv.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = shape0;
        shape.insert(axis, n);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(shape, data),
            Op::Stack {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), d);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Elementwise KL(Beta(at, bt) ‖ Beta(as, bs)); all four share one shape.
    pub fn beta_kl(&mut self, at: Var, bt: Var, as_: Var, bs: Var) -> Var {
        let shape = self.value(at).shape().to_vec();
        for v in [bt, as_, bs] {
            assert_eq!(self.value(v).shape(), &shape[..], "beta_kl shape mismatch");
        }
        let data = (0..self.value(at).len())
            .map(|i| {
                beta_kl_scalar(
                    self.value(at).data()[i],
                    self.value(bt).data()[i],
                    self.value(as_).data()[i],
                    self.value(bs).data()[i],
                )
            })
            .collect();
        let ng = [at, bt, as_, bs].iter().any(|&v| self.ng(v));
        self.push(Tensor::new(shape, data), Op::BetaKl { at, bt, as_, bs }, ng)
    }

    /// Per-row binary cross-entropy of sigmoid(scores) against one-hot targets,
    /// with probabilities clipped to `[clip, 1 - clip]`. Output `[rows]`.
    pub fn bce_with_logits(&mut self, scores: Var, targets: &[usize], clip: f64) -> Var {
        let sv = self.value(scores);
        assert_eq!(sv.rows(), targets.len());
        let data = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| bce_row(sv.row(r), t, clip))
            .collect();
        let ng = self.ng(scores);
        self.push(
            Tensor::new(vec![targets.len()], data),
            Op::BceWithLogits {
                scores,
                targets: targets.to_vec(),
                clip,
            },
            ng,
        )
    }

    /// Per-row softmax cross-entropy. Output `[rows]`.
    pub fn softmax_ce(&mut self, scores: Var, targets: &[usize]) -> Var {
        let sv = self.value(scores);
        assert_eq!(sv.rows(), targets.len());
        let data = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = sv.row(r);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .collect();
        let ng = self.ng(scores);
        self.push(
            Tensor::new(vec![targets.len()], data),
            Op::SoftmaxCe {
                scores,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]));
        let mut out = Gradients {
            grads: (0..store.len()).map(|_| None).collect(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduces a full-shape gradient onto a suffix-broadcast operand.
    fn reduce_to(&self, g: &[f64], target: Var, f: impl Fn(usize) -> f64) -> Tensor {
        let tv = self.value(target);
        let n = tv.len();
        let mut out = vec![0.0; n];
        if g.len() == n {
            for (i, (o, &gi)) in out.iter_mut().zip(g).enumerate() {
                *o = gi * f(i);
            }
        } else {
            for (chunk_start, chunk) in (0..g.len()).step_by(n).zip(g.chunks(n)) {
                for (j, (o, &gi)) in out.iter_mut().zip(chunk).enumerate() {
                    *o += gi * f(chunk_start + j);
                }
            }
        }
        Tensor::new(tv.shape().to_vec(), out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) {
        let gd = g.data();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => match &mut out.grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::Add(a, b) => {
                if self.ng(*b) {
                    let gb = self.reduce_to(gd, *b, |_| 1.0);
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    let gb = self.reduce_to(gd, *b, |_| -1.0);
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let bn = bv.len();
                if self.ng(*b) {
                    let gb = self.reduce_to(gd, *b, |i| av[i]);
                    self.accumulate(grads, *b, gb);
                }
                if self.ng(*a) {
                    let ga: Vec<f64> = gd.iter().enumerate().map(|(i, x)| x * bv[i % bn]).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga));
                }
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let bn = bv.len();
                if self.ng(*b) {
                    let gb = self.reduce_to(gd, *b, |i| {
                        let d = bv[i % bn];
                        -av[i] / (d * d)
                    });
                    self.accumulate(grads, *b, gb);
                }
                if self.ng(*a) {
                    let ga: Vec<f64> = gd.iter().enumerate().map(|(i, x)| x / bv[i % bn]).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Unary(a, kind) => {
                let xv = self.value(*a).data();
                let yv = node.value.data();
                let ga = gd
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(gi, (&x, &y))| gi * unary_derivative(*kind, x, y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga));
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(xv)
                    .map(|(gi, &x)| if x < *lo || x > *hi { 0.0 } else { *gi })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga));
            }
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = av.last_dim();
                let m = av.rows();
                let n = node.value.last_dim();
                if self.ng(*a) {
                    // dA = G · Bᵀ (or G · B when B was used transposed)
                    let ga = gemm(gd, m, n, bv.data(), k, !*trans_b);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga));
                }
                if self.ng(*b) {
                    let gb = if *trans_b {
                        gemm_tn(gd, m, n, av.data(), k)
                    } else {
                        gemm_tn(av.data(), m, k, gd, n)
                    };
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(bv.len());
                for i in 0..batch {
                    let gsl = &gd[i * m * n..(i + 1) * m * n];
                    let asl = &av.data()[i * m * k..(i + 1) * m * k];
                    let bsl = &bv.data()[i * k * n..(i + 1) * k * n];
                    if self.ng(*a) {
                        ga.extend(gemm(gsl, m, n, bsl, k, !*trans_b));
                    }
                    if self.ng(*b) {
                        if *trans_b {
                            gb.extend(gemm_tn(gsl, m, n, asl, k));
                        } else {
                            gb.extend(gemm_tn(asl, m, k, gsl, n));
                        }
                    }
                }
                if self.ng(*a) {
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb));
                }
            }
            Op::Gather { table, indices } => {
                let tv = self.value(*table);
                let d = tv.last_dim();
                let mut gt = vec![0.0; tv.len()];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[idx * d + j] += gd[r * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), gt));
            }
            Op::SplitHeads(x, heads) => {
                let xv = self.value(*x);
                let (b, l, hd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let dh = hd / heads;
                let mut gx = vec![0.0; xv.len()];
                for bi in 0..b {
                    for li in 0..l {
                        for h in 0..*heads {
                            let dst = (bi * l + li) * hd + h * dh;
                            let src = ((bi * heads + h) * l + li) * dh;
                            gx[dst..dst + dh].copy_from_slice(&gd[src..src + dh]);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx));
            }
            Op::MergeHeads(x, heads) => {
                let xv = self.value(*x);
                let (bh, l, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let b = bh / heads;
                let hd = heads * dh;
                let mut gx = vec![0.0; xv.len()];
                for bi in 0..b {
                    for li in 0..l {
                        for h in 0..*heads {
                            let src = (bi * l + li) * hd + h * dh;
                            let dst = ((bi * heads + h) * l + li) * dh;
                            gx[dst..dst + dh].copy_from_slice(&gd[src..src + dh]);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx));
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let d = y.last_dim();
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx));
            }
            Op::TransposeLast2(x) => {
                let shape = g.shape();
                let nd = shape.len();
                let (m, n) = (shape[nd - 2], shape[nd - 1]);
                let batch = g.len() / (m * n);
                let mut gx = vec![0.0; g.len()];
                for bi in 0..batch {
                    let base = bi * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            gx[base + j * m + i] = gd[base + i * n + j];
                        }
                    }
                }
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(xs, gx));
            }
            Op::SumAxis(x, axis) => {
                let xv = self.value(*x);
                let (outer, n, inner) = split_at_axis(xv.shape(), *axis);
                let mut gx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..n {
                        gx[(o * n + i) * inner..(o * n + i + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx));
            }
            Op::SelectAxis { x, axis, index } => {
                let xv = self.value(*x);
                let (outer, n, inner) = split_at_axis(xv.shape(), *axis);
                let mut gx = vec![0.0; xv.len()];
                for o in 0..outer {
                    let start = (o * n + index) * inner;
                    gx[start..start + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx));
            }
            Op::Concat { a, b, axis } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (outer, na, inner) = split_at_axis(av.shape(), *axis);
                let nb = bv.shape()[*axis];
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(bv.len());
                for o in 0..outer {
                    let base = o * (na + nb) * inner;
                    ga.extend_from_slice(&gd[base..base + na * inner]);
                    gb.extend_from_slice(&gd[base + na * inner..base + (na + nb) * inner]);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga));
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb));
            }
            Op::Stack { parts, axis } => {
                let shape0 = self.value(parts[0]).shape().to_vec();
                let outer: usize = shape0[..*axis].iter().product();
                let inner: usize = shape0[*axis..].iter().product();
                let n = parts.len();
                for (p, &v) in parts.iter().enumerate() {
                    if !self.ng(v) {
                        continue;
                    }
                    let mut gp = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        gp.extend_from_slice(&gd[(o * n + p) * inner..(o * n + p + 1) * inner]);
                    }
                    self.accumulate(grads, v, Tensor::new(shape0.clone(), gp));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let rows = inv_std.len();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        gx[r * d + j] = inv_std[r] * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                    }
                }
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(xs, gx));
                self.accumulate(grads, *gamma, Tensor::new(vec![d], ggamma));
                self.accumulate(grads, *beta, Tensor::new(vec![d], gbeta));
            }
            Op::BetaKl { at, bt, as_, bs } => {
                let n = g.len();
                let mut parts = [
                    vec![0.0; n],
                    vec![0.0; n],
                    vec![0.0; n],
                    vec![0.0; n],
                ];
                for i in 0..n {
                    let d = beta_kl_grad(
                        self.value(*at).data()[i],
                        self.value(*bt).data()[i],
                        self.value(*as_).data()[i],
                        self.value(*bs).data()[i],
                    );
                    for k in 0..4 {
                        parts[k][i] = gd[i] * d[k];
                    }
                }
                let shape = g.shape().to_vec();
                let [p0, p1, p2, p3] = parts;
                self.accumulate(grads, *at, Tensor::new(shape.clone(), p0));
                self.accumulate(grads, *bt, Tensor::new(shape.clone(), p1));
                self.accumulate(grads, *as_, Tensor::new(shape.clone(), p2));
                self.accumulate(grads, *bs, Tensor::new(shape, p3));
            }
            Op::BceWithLogits {
                scores,
                targets,
                clip,
            } => {
                let sv = self.value(*scores);
                let n = sv.last_dim();
                let mut gs = vec![0.0; sv.len()];
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..n {
                        let p = sigmoid(sv.row(r)[j]);
                        if p >= *clip && p <= 1.0 - *clip {
                            let y = if j == t { 1.0 } else { 0.0 };
                            gs[r * n + j] = gd[r] * (p - y);
                        }
                    }
                }
                self.accumulate(grads, *scores, Tensor::new(sv.shape().to_vec(), gs));
            }
            Op::SoftmaxCe { scores, targets } => {
                let sv = self.value(*scores);
                let n = sv.last_dim();
                let mut gs = vec![0.0; sv.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = sv.row(r);
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..n {
                        let p = (row[j] - mx).exp() / z;
                        let y = if j == t { 1.0 } else { 0.0 };
                        gs[r * n + j] = gd[r] * (p - y);
                    }
                }
                self.accumulate(grads, *scores, Tensor::new(sv.shape().to_vec(), gs));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = gd[0] / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), v));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), gd[0]));
            }
            Op::Reshape(x) => {
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshaped(xs));
            }
        }
    }
}

/// Binary cross-entropy of one score row against a one-hot target.
pub fn bce_row(scores: &[f64], target: usize, clip: f64) -> f64 {
    scores
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let p = sigmoid(s).clamp(clip, 1.0 - clip);
            if j == target {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

pub(crate) fn log_sigmoid_scalar(x: f64) -> f64 {
    log_sigmoid(x)
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}
