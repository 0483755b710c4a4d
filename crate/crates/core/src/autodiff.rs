//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a node holding its output
//! value. Nodes are appended in evaluation order, so the node list is already
//! a topological order and the backward pass is a single reverse sweep that
//! visits each node once.
//!
//! ```
//! use endx::autodiff::Graph;
//! use endx::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let p = g.input(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = g.mul(p, p);
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::collections::BTreeMap;

use crate::error::{EndxError, Result};
use crate::params::ParameterStore;
use crate::tensor::{softmax_in_place, Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param(String),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { a: Var, bias: Var },
    Scale(Var, F),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    Gather { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    SplitHeads { a: Var, batch: usize, len: usize, heads: usize },
    MergeHeads { a: Var, batch: usize, len: usize, heads: usize },
    SliceCols { a: Var, start: usize },
    SelectTime { a: Var, t: usize, len: usize },
    StackTime { parts: Vec<Var> },
    RowMask { a: Var, keep: Vec<bool> },
    RowBlend { new: Var, old: Var, take_new: Vec<bool> },
    Sum(Var),
    Mean(Var),
    DiagCrossEntropy { logits: Var, probs: Vec<F> },
    KlDiv { teacher: Var, student: Var },
    SqDist { x: Var, y: Var },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Softmax { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectTime { .. } => "select_time",
            Op::StackTime { .. } => "stack_time",
            Op::RowMask { .. } => "row_mask",
            Op::RowBlend { .. } => "row_blend",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::DiagCrossEntropy { .. } => "diag_cross_entropy",
            Op::KlDiv { .. } => "kl_div",
            Op::SqDist { .. } => "sq_dist",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// The computation tape.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, Var>,
    fault: Option<String>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First operation that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some(op) => Err(EndxError::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        if self.fault.is_none() && !value.all_finite() {
            self.fault = Some(op.name().to_string());
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf. `trainable` leaves receive gradients.
    pub fn input(&mut self, value: Tensor<F>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.input(value, false)
    }

    /// Leaf bound to a named parameter. Repeated requests for the same name
    /// return the same node.
    pub fn param(&mut self, store: &ParameterStore<F>, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Copies the value into a constant leaf; nothing flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` for rank-2 operands with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs rank-2 operands, got {sa:?} and {sb:?}");
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner extents differ: {sa:?} x {sb:?} (ta={ta}, tb={tb})");
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, F::zero(), &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, ta, tb }, ng)
    }

    /// Batched product of rank-3 operands: `[n, m, k] x [n, k, p]`, or
    /// `[n, m, k] x [n, p, k]ᵀ` when `tb`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "batch_matmul shapes {sa:?} x {sb:?}");
        let (bn, m, k) = (sa[0], sa[1], sa[2]);
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "batch_matmul inner extents differ: {sa:?} x {sb:?}");
        let mut out = vec![F::zero(); bn * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..bn {
                F::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    F::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(vec![bn, m, n], out), Op::BatchMatMul { a, b, tb }, ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{} operands differ in shape", op.name());
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(shape, data), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of `a` (last extent `n`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let n = self.value(a).cols();
        assert_eq!(self.value(bias).len(), n, "bias length differs from last extent of {:?}", self.shape(a));
        let mut out = self.value(a).clone();
        let bv = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(bv).for_each(|(x, &b)| *x = *x + b);
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push(out, Op::AddBias { a, bias }, ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let shape = va.shape().to_vec();
        let ng = self.needs(a);
        self.push(Tensor::from_parts(shape, data), op, ng)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(F::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| F::one() / (F::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    /// Softmax over the last axis. `mask` carries one flag per element;
    /// masked entries are exact zeros. A row with no valid entry records an
    /// "empty softmax support" fault and comes out as zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let mut out = self.value(a).clone();
        if let Some(m) = mask {
            assert_eq!(m.len(), out.len(), "softmax mask length");
        }
        let cols = out.cols();
        if softmax_in_place(out.data_mut(), cols, mask).is_err() && self.fault.is_none() {
            self.fault = Some("softmax_rows (empty softmax support)".into());
        }
        let ng = self.needs(a);
        self.push(out, Op::Softmax { a }, ng)
    }

    /// Row-wise layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let n = vx.cols();
        assert_eq!(self.value(gain).len(), n, "layer_norm gain length");
        assert_eq!(self.value(bias).len(), n, "layer_norm bias length");
        let eps = F::lit(LAYER_NORM_EPS);
        let nf = F::from_usize(n).unwrap();
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(vx.rows());
        for row in vx.data().chunks(n) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<F> = xhat
            .chunks(n)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &gi), &bi)| h * gi + bi))
            .collect();
        let shape = vx.shape().to_vec();
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        assert_eq!(t.rank(), 2, "gather table must be rank-2");
        let d = t.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < t.shape()[0], "gather id {id} out of range {}", t.shape()[0]);
            out.extend_from_slice(t.row(id));
        }
        let ng = self.needs(table);
        self.push(Tensor::from_parts(vec![ids.len(), d], out), Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape).expect("reshape extents");
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.shape().to_vec();
        assert!(s.len() == 2 || s.len() == 3, "transpose needs rank 2 or 3");
        let (bn, r, c) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
        let src = va.data();
        let mut out = vec![F::zero(); src.len()];
        for b in 0..bn {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let shape = if s.len() == 2 { vec![c, r] } else { vec![bn, c, r] };
        let ng = self.needs(a);
        self.push(Tensor::from_parts(shape, out), Op::Transpose(a), ng)
    }

    /// `[batch*len, heads*dh]` to `[batch*heads, len, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, len: usize, heads: usize) -> Var {
        let va = self.value(a);
        let d = va.cols();
        assert_eq!(va.rows(), batch * len, "split_heads rows");
        assert_eq!(d % heads, 0, "split_heads: {d} not divisible by {heads}");
        let dh = d / heads;
        let src = va.data();
        let mut out = vec![F::zero(); src.len()];
        for b in 0..batch {
            for l in 0..len {
                let row = &src[(b * len + l) * d..(b * len + l + 1) * d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * len + l) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let ng = self.needs(a);
        self.push(
            Tensor::from_parts(vec![batch * heads, len, dh], out),
            Op::SplitHeads { a, batch, len, heads },
            ng,
        )
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, len: usize, heads: usize) -> Var {
        let va = self.value(a);
        let s = va.shape();
        assert!(s.len() == 3 && s[0] == batch * heads && s[1] == len, "merge_heads shape {s:?}");
        let dh = s[2];
        let d = dh * heads;
        let src = va.data();
        let mut out = vec![F::zero(); src.len()];
        for b in 0..batch {
            for l in 0..len {
                for h in 0..heads {
                    let from = ((b * heads + h) * len + l) * dh;
                    let to = (b * len + l) * d + h * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let ng = self.needs(a);
        self.push(
            Tensor::from_parts(vec![batch * len, d], out),
            Op::MergeHeads { a, batch, len, heads },
            ng,
        )
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let c = va.cols();
        assert!(start < end && end <= c, "slice_cols {start}..{end} of {c}");
        let w = end - start;
        let mut out = Vec::with_capacity(va.rows() * w);
        for row in va.data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let rows = va.rows();
        let ng = self.needs(a);
        self.push(Tensor::from_parts(vec![rows, w], out), Op::SliceCols { a, start }, ng)
    }

    /// From `[batch*len, d]` (sequence-major per batch item) pick the rows
    /// of timestep `t`, giving `[batch, d]`.
    pub fn select_time(&mut self, a: Var, t: usize, len: usize) -> Var {
        let va = self.value(a);
        let d = va.cols();
        let batch = va.rows() / len;
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            out.extend_from_slice(va.row(b * len + t));
        }
        let ng = self.needs(a);
        self.push(Tensor::from_parts(vec![batch, d], out), Op::SelectTime { a, t, len }, ng)
    }

    /// Inverse of [`Graph::select_time`] over all timesteps: `parts[t]` is
    /// `[batch, d]`, the result is `[batch*len, d]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Var {
        let len = parts.len();
        assert!(len > 0, "stack_time of nothing");
        let (batch, d) = (self.value(parts[0]).rows(), self.value(parts[0]).cols());
        let mut out = vec![F::zero(); batch * len * d];
        for (t, &p) in parts.iter().enumerate() {
            let vp = self.value(p);
            assert_eq!(vp.shape(), &[batch, d], "stack_time part shape");
            for b in 0..batch {
                out[(b * len + t) * d..(b * len + t + 1) * d].copy_from_slice(vp.row(b));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_parts(vec![batch * len, d], out), Op::StackTime { parts: parts.to_vec() }, ng)
    }

    /// Zeroes rows whose flag is false.
    pub fn row_mask(&mut self, a: Var, keep: &[bool]) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        assert_eq!(keep.len(), out.rows(), "row_mask length");
        for (row, &k) in out.data_mut().chunks_mut(c).zip(keep) {
            if !k {
                row.iter_mut().for_each(|x| *x = F::zero());
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::RowMask { a, keep: keep.to_vec() }, ng)
    }

    /// Row `r` comes from `new` where `take_new[r]`, else from `old`.
    pub fn row_blend(&mut self, new: Var, old: Var, take_new: &[bool]) -> Var {
        let (vn, vo) = (self.value(new), self.value(old));
        assert_eq!(vn.shape(), vo.shape(), "row_blend shapes");
        assert_eq!(take_new.len(), vn.rows(), "row_blend length");
        let c = vn.cols();
        let mut out = Vec::with_capacity(vn.len());
        for (r, &t) in take_new.iter().enumerate() {
            out.extend_from_slice(if t { vn.row(r) } else { vo.row(r) });
        }
        let _ = c;
        let shape = vn.shape().to_vec();
        let ng = self.needs(new) || self.needs(old);
        self.push(Tensor::from_parts(shape, out), Op::RowBlend { new, old, take_new: take_new.to_vec() }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.sum() / F::from_usize(va.len().max(1)).unwrap();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// `-(1/B) Σ_i log softmax(logits_i)[i]` for a square `B x B` score matrix.
    pub fn diag_cross_entropy(&mut self, logits: Var) -> Var {
        let vl = self.value(logits);
        let s = vl.shape();
        assert!(s.len() == 2 && s[0] == s[1], "diag_cross_entropy needs a square matrix, got {s:?}");
        let b = s[0];
        let mut total = F::zero();
        let mut probs = Vec::with_capacity(b * b);
        for (i, row) in vl.data().chunks(b).enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total = total + (lse - row[i]);
            probs.extend(row.iter().map(|&x| (x - max).exp() / z));
        }
        let loss = total / F::from_usize(b).unwrap();
        let ng = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::DiagCrossEntropy { logits, probs }, ng)
    }

    /// Mean-over-rows KL divergence `(1/B) Σ_ij t_ij ln(t_ij / max(s_ij, 1e-12))`.
    ///
    /// The teacher is a fixed target: no gradient reaches it. Terms with
    /// `t_ij = 0` contribute 0.
    pub fn kl_div(&mut self, teacher: Var, student: Var) -> Var {
        let (vt, vs) = (self.value(teacher), self.value(student));
        assert_eq!(vt.shape(), vs.shape(), "kl_div shapes");
        let floor = F::lit(KL_FLOOR);
        let mut total = F::zero();
        for (&t, &s) in vt.data().iter().zip(vs.data()) {
            if t > F::zero() {
                total = total + t * (t.ln() - s.max(floor).ln());
            }
        }
        let loss = total / F::from_usize(vt.rows().max(1)).unwrap();
        let ng = self.needs(student);
        self.push(Tensor::scalar(loss), Op::KlDiv { teacher, student }, ng)
    }

    /// Pairwise squared Euclidean distances between rows of `x` and `y`.
    pub fn sq_dist(&mut self, x: Var, y: Var) -> Var {
        let (vx, vy) = (self.value(x), self.value(y));
        assert_eq!(vx.cols(), vy.cols(), "sq_dist dims");
        let (n, m) = (vx.rows(), vy.rows());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(vx.row(i).iter().zip(vy.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum());
            }
        }
        let ng = self.needs(x) || self.needs(y);
        self.push(Tensor::from_parts(vec![n, m], out), Op::SqDist { x, y }, ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.check()?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(EndxError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![F::one()]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    let op = match &self.nodes[i].op {
                        Op::Param(name) => format!("gradient of parameter {name}"),
                        other => format!("backward of {}", other.name()),
                    };
                    return Err(EndxError::NonFinite { op });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Tensor<F>>], v: Var) -> Option<&'a mut [F]> {
        if !self.needs(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let k = if ta { va.shape()[0] } else { va.shape()[1] };
                if let Some(da) = self.buf(grads, a) {
                    if ta {
                        // dA = op(B) · dCᵀ  (k x m)
                        F::gemm(k, n, m, vb.data(), tb, gd, true, F::one(), da);
                    } else {
                        // dA = dC · op(B)ᵀ  (m x k)
                        F::gemm(m, n, k, gd, false, vb.data(), !tb, F::one(), da);
                    }
                }
                if let Some(db) = self.buf(grads, b) {
                    if tb {
                        // dB = dCᵀ · op(A)  (n x k)
                        F::gemm(n, m, k, gd, true, va.data(), ta, F::one(), db);
                    } else {
                        // dB = op(A)ᵀ · dC  (k x n)
                        F::gemm(k, m, n, va.data(), !ta, gd, false, F::one(), db);
                    }
                }
            }
            &Op::BatchMatMul { a, b, tb } => {
                let (va, vb) = (self.value(a), self.value(b));
                let (bn, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = y.shape()[2];
                if let Some(da) = self.buf(grads, a) {
                    for i in 0..bn {
                        F::gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            !tb,
                            F::one(),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if let Some(db) = self.buf(grads, b) {
                    for i in 0..bn {
                        let ga = &gd[i * m * n..(i + 1) * m * n];
                        let a_i = &va.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if tb {
                            F::gemm(n, m, k, ga, true, a_i, false, F::one(), out);
                        } else {
                            F::gemm(k, m, n, a_i, true, ga, false, F::one(), out);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.buf(grads, v) {
                        d.iter_mut().zip(gd).for_each(|(x, &g)| *x = *x + g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(d) = self.buf(grads, a) {
                    d.iter_mut().zip(gd).for_each(|(x, &g)| *x = *x + g);
                }
                if let Some(d) = self.buf(grads, b) {
                    d.iter_mut().zip(gd).for_each(|(x, &g)| *x = *x - g);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if let Some(d) = self.buf(grads, a) {
                    for ((x, &g), &o) in d.iter_mut().zip(gd).zip(vb) {
                        *x = *x + g * o;
                    }
                }
                if let Some(d) = self.buf(grads, b) {
                    for ((x, &g), &o) in d.iter_mut().zip(gd).zip(va) {
                        *x = *x + g * o;
                    }
                }
            }
            &Op::AddBias { a, bias } => {
                if let Some(d) = self.buf(grads, a) {
                    d.iter_mut().zip(gd).for_each(|(x, &g)| *x = *x + g);
                }
                let n = y.cols();
                if let Some(d) = self.buf(grads, bias) {
                    for row in gd.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(x, &g)| *x = *x + g);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(d) = self.buf(grads, a) {
                    d.iter_mut().zip(gd).for_each(|(x, &g)| *x = *x + g * c);
                }
            }
            &Op::Tanh(a) => {
                if let Some(d) = self.buf(grads, a) {
                    for ((x, &g), &t) in d.iter_mut().zip(gd).zip(y.data()) {
                        *x = *x + g * (F::one() - t * t);
                    }
                }
            }
            &Op::Relu(a) => {
                let va = self.value(a).data();
                if let Some(d) = self.buf(grads, a) {
                    for ((x, &g), &inp) in d.iter_mut().zip(gd).zip(va) {
                        if inp > F::zero() {
                            *x = *x + g;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(d) = self.buf(grads, a) {
                    for ((x, &g), &s) in d.iter_mut().zip(gd).zip(y.data()) {
                        *x = *x + g * s * (F::one() - s);
                    }
                }
            }
            &Op::Exp(a) => {
                if let Some(d) = self.buf(grads, a) {
                    for ((x, &g), &e) in d.iter_mut().zip(gd).zip(y.data()) {
                        *x = *x + g * e;
                    }
                }
            }
            &Op::Softmax { a } => {
                let c = y.cols();
                if let Some(d) = self.buf(grads, a) {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: F = grow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
                        for ((x, &g), &p) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x = *x + p * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = y.cols();
                let nf = F::from_usize(n).unwrap();
                let gv = self.value(*gain).data();
                if let Some(d) = self.buf(grads, *x) {
                    for (r, (drow, grow)) in d.chunks_mut(n).zip(gd.chunks(n)).enumerate() {
                        let h = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<F> = grow.iter().zip(gv).map(|(&g, &w)| g * w).collect();
                        let sum_dh: F = dh.iter().copied().sum();
                        let sum_dh_h: F = dh.iter().zip(h).map(|(&a, &b)| a * b).sum();
                        let scale = inv_std[r] / nf;
                        for j in 0..n {
                            drow[j] = drow[j] + scale * (nf * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                }
                if let Some(d) = self.buf(grads, *gain) {
                    for (grow, h) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] = d[j] + grow[j] * h[j];
                        }
                    }
                }
                if let Some(d) = self.buf(grads, *bias) {
                    for grow in gd.chunks(n) {
                        d.iter_mut().zip(grow).for_each(|(x, &g)| *x = *x + g);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let dcols = y.cols();
                if let Some(d) = self.buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut d[id * dcols..(id + 1) * dcols];
                        dst.iter_mut().zip(&gd[r * dcols..(r + 1) * dcols]).for_each(|(x, &g)| *x = *x + g);
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(d) = self.buf(grads, a) {
                    d.iter_mut().zip(gd).for_each(|(x, &g)| *x = *x + g);
                }
            }
            &Op::Transpose(a) => {
                let s = y.shape();
                // y is [.., c, r] where the input was [.., r, c].
                let (bn, c, r) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
                if let Some(d) = self.buf(grads, a) {
                    for b in 0..bn {
                        let off = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                d[off + i * c + j] = d[off + i * c + j] + gd[off + j * r + i];
                            }
                        }
                    }
                }
            }
            &Op::SplitHeads { a, batch, len, heads } => {
                let dh = y.shape()[2];
                let d_model = dh * heads;
                if let Some(d) = self.buf(grads, a) {
                    for b in 0..batch {
                        for l in 0..len {
                            for h in 0..heads {
                                let from = ((b * heads + h) * len + l) * dh;
                                let to = (b * len + l) * d_model + h * dh;
                                for e in 0..dh {
                                    d[to + e] = d[to + e] + gd[from + e];
                                }
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { a, batch, len, heads } => {
                let d_model = y.cols();
                let dh = d_model / heads;
                if let Some(d) = self.buf(grads, a) {
                    for b in 0..batch {
                        for l in 0..len {
                            for h in 0..heads {
                                let to = ((b * heads + h) * len + l) * dh;
                                let from = (b * len + l) * d_model + h * dh;
                                for e in 0..dh {
                                    d[to + e] = d[to + e] + gd[from + e];
                                }
                            }
                        }
                    }
                }
            }
            &Op::SliceCols { a, start } => {
                let c = self.value(a).cols();
                let w = y.cols();
                if let Some(d) = self.buf(grads, a) {
                    for (drow, grow) in d.chunks_mut(c).zip(gd.chunks(w)) {
                        for (x, &g) in drow[start..start + w].iter_mut().zip(grow) {
                            *x = *x + g;
                        }
                    }
                }
            }
            &Op::SelectTime { a, t, len } => {
                let dcols = y.cols();
                if let Some(d) = self.buf(grads, a) {
                    for b in 0..y.rows() {
                        let to = (b * len + t) * dcols;
                        for e in 0..dcols {
                            d[to + e] = d[to + e] + gd[b * dcols + e];
                        }
                    }
                }
            }
            Op::StackTime { parts } => {
                let len = parts.len();
                let dcols = y.cols();
                let batch = y.rows() / len;
                for (t, &p) in parts.iter().enumerate() {
                    if let Some(d) = self.buf(grads, p) {
                        for b in 0..batch {
                            let from = (b * len + t) * dcols;
                            for e in 0..dcols {
                                d[b * dcols + e] = d[b * dcols + e] + gd[from + e];
                            }
                        }
                    }
                }
            }
            Op::RowMask { a, keep } => {
                let c = y.cols();
                if let Some(d) = self.buf(grads, *a) {
                    for ((drow, grow), &k) in d.chunks_mut(c).zip(gd.chunks(c)).zip(keep) {
                        if k {
                            drow.iter_mut().zip(grow).for_each(|(x, &g)| *x = *x + g);
                        }
                    }
                }
            }
            Op::RowBlend { new, old, take_new } => {
                let c = y.cols();
                for (v, want) in [(*new, true), (*old, false)] {
                    if let Some(d) = self.buf(grads, v) {
                        for ((drow, grow), &t) in d.chunks_mut(c).zip(gd.chunks(c)).zip(take_new) {
                            if t == want {
                                drow.iter_mut().zip(grow).for_each(|(x, &g)| *x = *x + g);
                            }
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(d) = self.buf(grads, a) {
                    d.iter_mut().for_each(|x| *x = *x + gd[0]);
                }
            }
            &Op::Mean(a) => {
                let n = F::from_usize(self.value(a).len().max(1)).unwrap();
                if let Some(d) = self.buf(grads, a) {
                    d.iter_mut().for_each(|x| *x = *x + gd[0] / n);
                }
            }
            Op::DiagCrossEntropy { logits, probs } => {
                let b = self.value(*logits).shape()[0];
                let scale = gd[0] / F::from_usize(b).unwrap();
                if let Some(d) = self.buf(grads, *logits) {
                    for i in 0..b {
                        for j in 0..b {
                            let target = if i == j { F::one() } else { F::zero() };
                            d[i * b + j] = d[i * b + j] + scale * (probs[i * b + j] - target);
                        }
                    }
                }
            }
            &Op::KlDiv { teacher, student } => {
                let (vt, vs) = (self.value(teacher), self.value(student));
                let floor = F::lit(KL_FLOOR);
                let scale = gd[0] / F::from_usize(vt.rows().max(1)).unwrap();
                if let Some(d) = self.buf(grads, student) {
                    for ((x, &t), &s) in d.iter_mut().zip(vt.data()).zip(vs.data()) {
                        if t > F::zero() && s > floor {
                            *x = *x - scale * t / s;
                        }
                    }
                }
            }
            &Op::SqDist { x, y: yv } => {
                let (vx, vy) = (self.value(x), self.value(yv));
                let (n, m, dcols) = (vx.rows(), vy.rows(), vx.cols());
                let two = F::lit(2.0);
                if let Some(d) = self.buf(grads, x) {
                    for i in 0..n {
                        for j in 0..m {
                            let g = gd[i * m + j] * two;
                            for e in 0..dcols {
                                d[i * dcols + e] = d[i * dcols + e] + g * (vx.row(i)[e] - vy.row(j)[e]);
                            }
                        }
                    }
                }
                if let Some(d) = self.buf(grads, yv) {
                    for i in 0..n {
                        for j in 0..m {
                            let g = gd[i * m + j] * two;
                            for e in 0..dcols {
                                d[j * dcols + e] = d[j * dcols + e] - g * (vx.row(i)[e] - vy.row(j)[e]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Floor applied to the student probability inside the KL logarithm.
pub const KL_FLOOR: f64 = 1e-12;
