//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the adjoint. Node indices are a topological order, so the
//! backward sweep is a single reverse pass over the tape.

use std::fmt;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::real::{gemm, Layout, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation family, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Linear,
    Add,
    Sub,
    Mul,
    AddTiled,
    Scale,
    RowScale,
    Sum,
    Mean,
    Relu,
    Sigmoid,
    Gelu,
    Log,
    Clamp,
    MaskedSoftmax,
    LayerNorm,
    Attention,
    Conv2d,
    ConvTranspose2d,
    BatchNorm,
    Permute,
    Reshape,
    Concat,
    Narrow,
    Repeat,
    BalancedBce,
    Dice,
    Bce,
}

impl OpKind {
    pub const ALL: [OpKind; 30] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Linear,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddTiled,
        OpKind::Scale,
        OpKind::RowScale,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Gelu,
        OpKind::Log,
        OpKind::Clamp,
        OpKind::MaskedSoftmax,
        OpKind::LayerNorm,
        OpKind::Attention,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::BatchNorm,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Repeat,
        OpKind::BalancedBce,
        OpKind::Dice,
        OpKind::Bce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddTiled => "add_tiled",
            OpKind::Scale => "scale",
            OpKind::RowScale => "row_scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Gelu => "gelu",
            OpKind::Log => "log",
            OpKind::Clamp => "clamp",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Attention => "attention",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Repeat => "repeat",
            OpKind::BalancedBce => "balanced_bce",
            OpKind::Dice => "dice",
            OpKind::Bce => "bce",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddTiled { a: Var, b: Var },
    Scale { a: Var, c: T },
    RowScale { a: Var, factors: Vec<T> },
    Sum { a: Var },
    Mean { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Gelu { a: Var, cdf: Vec<T> },
    Log { a: Var },
    Clamp { a: Var, lo: T, hi: T },
    MaskedSoftmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention(Box<crate::nn::AttentionCache<T>>),
    Conv2d(Box<crate::nn::ConvCache<T>>),
    ConvTranspose2d(Box<crate::nn::ConvCache<T>>),
    BatchNorm(Box<crate::nn::BatchNormCache<T>>),
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, outer: usize, inners: Vec<usize> },
    Narrow { a: Var, outer: usize, inner: usize, extent: usize, start: usize, len: usize },
    Repeat { a: Var, times: usize },
    BalancedBce { pred: Var, target: Arc<[T]>, samples: usize },
    Dice { pred: Var, target: Arc<[T]>, samples: usize },
    Bce { pred: Var, target: Arc<[T]> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddTiled { .. } => OpKind::AddTiled,
            Op::Scale { .. } => OpKind::Scale,
            Op::RowScale { .. } => OpKind::RowScale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Log { .. } => OpKind::Log,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::MaskedSoftmax { .. } => OpKind::MaskedSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Attention(_) => OpKind::Attention,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::ConvTranspose2d(_) => OpKind::ConvTranspose2d,
            Op::BatchNorm(_) => OpKind::BatchNorm,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Repeat { .. } => OpKind::Repeat,
            Op::BalancedBce { .. } => OpKind::BalancedBce,
            Op::Dice { .. } => OpKind::Dice,
            Op::Bce { .. } => OpKind::Bce,
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Tensor<T>>,
}

/// A differentiation tape. Build one per forward pass; it can be
/// differentiated exactly once.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    backpropagated: bool,
    fault: Option<OpKind>,
    profile: Option<Box<OpProfile>>,
}

/// Wall time per op family, forward and backward. Forward time of an op is
/// measured from the previous recorded node, so it includes caller overhead.
#[derive(Clone, Debug)]
pub struct OpProfile {
    pub forward: [std::time::Duration; OpKind::ALL.len()],
    pub backward: [std::time::Duration; OpKind::ALL.len()],
    last: std::time::Instant,
}

impl OpProfile {
    fn new() -> Self {
        OpProfile { forward: Default::default(), backward: Default::default(), last: std::time::Instant::now() }
    }

    /// `(op, forward, backward)` rows, slowest first.
    pub fn rows(&self) -> Vec<(OpKind, std::time::Duration, std::time::Duration)> {
        let mut rows: Vec<_> = OpKind::ALL.iter().enumerate().map(|(i, &k)| (k, self.forward[i], self.backward[i])).collect();
        rows.sort_by_key(|r| std::cmp::Reverse(r.1 + r.2));
        rows
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers indexed by node, allocated lazily.
pub(crate) struct Grads<'a, T: Real> {
    nodes: &'a [Node<T>],
    bufs: Vec<Option<Vec<T>>>,
}

impl<'a, T: Real> Grads<'a, T> {
    /// Mutable gradient accumulator for `v`, or `None` when `v` needs no gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.bufs[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backpropagated: false, fault: None, profile: None }
    }

    /// Deliberately corrupts the adjoint of one operation family (scales its
    /// incoming gradient by 1.5). Used to confirm that gradient checks can fail.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Starts recording per-op wall time.
    pub fn enable_profile(&mut self) {
        self.profile = Some(Box::new(OpProfile::new()));
    }

    pub fn profile(&self) -> Option<&OpProfile> {
        self.profile.as_deref()
    }

    /// Distinct op families recorded on the tape, leaves excluded.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        let mut seen = [false; OpKind::ALL.len()];
        for n in &self.nodes {
            seen[n.op.kind() as usize] = true;
        }
        OpKind::ALL.iter().copied().filter(|&k| k != OpKind::Leaf && seen[k as usize]).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        if let Some(p) = self.profile.as_mut() {
            let now = std::time::Instant::now();
            p.forward[op.kind() as usize] += now - p.last;
            p.last = now;
        }
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        if let Some(p) = self.profile.as_mut() {
            p.last = std::time::Instant::now();
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across all
    /// uses of the leaf. A second call on the same graph is an error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(TensorError::DetachedRoot);
        }
        self.backpropagated = true;

        let mut grads = Grads { nodes: &self.nodes, bufs: (0..self.nodes.len()).map(|_| None).collect() };
        grads.bufs[root.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(mut g) = grads.bufs[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((i, g));
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                let bad = T::lit(1.5);
                g.iter_mut().for_each(|x| *x *= bad);
            }
            let start = self.profile.is_some().then(std::time::Instant::now);
            backward_node(node, &g, &mut grads);
            if let (Some(t), Some(p)) = (start, self.profile.as_mut()) {
                p.backward[node.op.kind() as usize] += t.elapsed();
            }
        }
        for (i, g) in leaf_grads {
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }
}

fn backward_node<T: Real>(node: &Node<T>, g: &[T], grads: &mut Grads<'_, T>) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let av = grads.value(*a);
            let bv = grads.value(*b);
            if let Some(ga) = grads.slot(*a) {
                gemm(m, n, k, T::one(), g, Layout::row_major(0, n), bv.data(), Layout::transposed(0, n), T::one(), ga, Layout::row_major(0, k));
            }
            if let Some(gb) = grads.slot(*b) {
                gemm(k, m, n, T::one(), av.data(), Layout::transposed(0, k), g, Layout::row_major(0, n), T::one(), gb, Layout::row_major(0, n));
            }
        }
        Op::Linear { x, w, b, rows, inp, out: o } => {
            let (r, i, o) = (*rows, *inp, *o);
            let xv = grads.value(*x);
            let wv = grads.value(*w);
            if let Some(gx) = grads.slot(*x) {
                gemm(r, o, i, T::one(), g, Layout::row_major(0, o), wv.data(), Layout::transposed(0, o), T::one(), gx, Layout::row_major(0, i));
            }
            if let Some(gw) = grads.slot(*w) {
                gemm(i, r, o, T::one(), xv.data(), Layout::transposed(0, i), g, Layout::row_major(0, o), T::one(), gw, Layout::row_major(0, o));
            }
            if let Some(b) = b {
                if let Some(gb) = grads.slot(*b) {
                    for row in g.chunks_exact(o) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(ga) = grads.slot(*a) {
                add_into(ga, g);
            }
            if let Some(gb) = grads.slot(*b) {
                add_into(gb, g);
            }
        }
        Op::Sub { a, b } => {
            if let Some(ga) = grads.slot(*a) {
                add_into(ga, g);
            }
            if let Some(gb) = grads.slot(*b) {
                for (acc, &v) in gb.iter_mut().zip(g) {
                    *acc -= v;
                }
            }
        }
        Op::Mul { a, b } => {
            let av = grads.value(*a);
            let bv = grads.value(*b);
            if let Some(ga) = grads.slot(*a) {
                for ((acc, &gv), &y) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *acc += gv * y;
                }
            }
            if let Some(gb) = grads.slot(*b) {
                for ((acc, &gv), &x) in gb.iter_mut().zip(g).zip(av.data()) {
                    *acc += gv * x;
                }
            }
        }
        Op::AddTiled { a, b } => {
            if let Some(ga) = grads.slot(*a) {
                add_into(ga, g);
            }
            if let Some(gb) = grads.slot(*b) {
                let n = gb.len();
                for tile in g.chunks_exact(n) {
                    add_into(gb, tile);
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = grads.slot(*a) {
                for (acc, &v) in ga.iter_mut().zip(g) {
                    *acc += *c * v;
                }
            }
        }
        Op::RowScale { a, factors } => {
            if let Some(ga) = grads.slot(*a) {
                let cols = ga.len() / factors.len();
                for ((row, grow), &f) in ga.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(factors) {
                    for (acc, &v) in row.iter_mut().zip(grow) {
                        *acc += f * v;
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = grads.slot(*a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean { a } => {
            if let Some(ga) = grads.slot(*a) {
                let s = g[0] / T::from_usize(ga.len()).unwrap();
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::Relu { a } => {
            let av = grads.value(*a);
            if let Some(ga) = grads.slot(*a) {
                for ((acc, &gv), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                    if x > T::zero() {
                        *acc += gv;
                    }
                }
            }
        }
        Op::Sigmoid { a } => {
            if let Some(ga) = grads.slot(*a) {
                for ((acc, &gv), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *acc += gv * y * (T::one() - y);
                }
            }
        }
        Op::Gelu { a, cdf } => {
            let av = grads.value(*a);
            if let Some(ga) = grads.slot(*a) {
                let norm = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::lit(0.5);
                for (((acc, &gv), &x), &c) in ga.iter_mut().zip(g).zip(av.data()).zip(cdf) {
                    let pdf = (-(x * x) * half).exp() * norm;
                    *acc += gv * (c + x * pdf);
                }
            }
        }
        Op::Log { a } => {
            let av = grads.value(*a);
            if let Some(ga) = grads.slot(*a) {
                for ((acc, &gv), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                    *acc += gv / x;
                }
            }
        }
        Op::Clamp { a, lo, hi } => {
            let av = grads.value(*a);
            if let Some(ga) = grads.slot(*a) {
                for ((acc, &gv), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                    if x >= *lo && x <= *hi {
                        *acc += gv;
                    }
                }
            }
        }
        Op::MaskedSoftmax { a } => {
            if let Some(ga) = grads.slot(*a) {
                crate::nn::softmax_backward(out.data(), g, ga, out.last_dim(), T::one());
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            crate::nn::layer_norm_backward(grads, g, *x, *gain, *bias, xhat, rstd);
        }
        Op::Attention(cache) => crate::nn::attention_backward(grads, g, cache),
        Op::Conv2d(cache) => crate::nn::conv2d_backward(grads, g, cache),
        Op::ConvTranspose2d(cache) => crate::nn::conv_transpose2d_backward(grads, g, cache),
        Op::BatchNorm(cache) => crate::nn::batch_norm_backward(grads, g, cache),
        Op::Permute { a, perm } => {
            let in_shape = grads.value(*a).shape().to_vec();
            if let Some(ga) = grads.slot(*a) {
                // out[i] = in[src(i)], so in[src(i)] += g[i]
                let src = permute_index_map(&in_shape, perm);
                for (i, &s) in src.iter().enumerate() {
                    ga[s] += g[i];
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = grads.slot(*a) {
                add_into(ga, g);
            }
        }
        Op::Concat { parts, outer, inners } => {
            let total: usize = inners.iter().sum();
            let mut offset = 0;
            for (p, &inner) in parts.iter().zip(inners) {
                if let Some(gp) = grads.slot(*p) {
                    for o in 0..*outer {
                        add_into(&mut gp[o * inner..(o + 1) * inner], &g[o * total + offset..o * total + offset + inner]);
                    }
                }
                offset += inner;
            }
        }
        Op::Narrow { a, outer, inner, extent, start, len } => {
            if let Some(ga) = grads.slot(*a) {
                let chunk = len * inner;
                for o in 0..*outer {
                    let src = &g[o * chunk..(o + 1) * chunk];
                    let dst_off = (o * extent + start) * inner;
                    add_into(&mut ga[dst_off..dst_off + chunk], src);
                }
            }
        }
        Op::Repeat { a, times } => {
            if let Some(ga) = grads.slot(*a) {
                let n = ga.len();
                for t in 0..*times {
                    add_into(ga, &g[t * n..(t + 1) * n]);
                }
            }
        }
        Op::BalancedBce { pred, target, samples } => {
            crate::loss::balanced_bce_backward(grads, g[0], *pred, target, *samples)
        }
        Op::Dice { pred, target, samples } => crate::loss::dice_backward(grads, g[0], *pred, target, *samples),
        Op::Bce { pred, target } => crate::loss::bce_backward(grads, g[0], *pred, target),
    }
}

pub(crate) fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

/// Standard normal CDF.
pub(crate) fn normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// For each output position of `permute(in_shape, perm)`, the flat input index it reads.
fn permute_index_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn check_same(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    /// `[m x k] * [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(TensorError::Shape { op: "matmul", lhs: av.shape().to_vec(), rhs: bv.shape().to_vec() });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), av.data(), Layout::row_major(0, k), bv.data(), Layout::row_major(0, n), T::zero(), &mut c, Layout::row_major(0, n));
        let value = Tensor::new(vec![m, n], c)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Affine map over the trailing axis: `x[.., in] * w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let inp = xv.last_dim();
        if wv.rank() != 2 || wv.shape()[0] != inp {
            return Err(TensorError::Shape { op: "linear", lhs: xv.shape().to_vec(), rhs: wv.shape().to_vec() });
        }
        let out = wv.shape()[1];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out {
                return Err(TensorError::Shape { op: "linear", lhs: wv.shape().to_vec(), rhs: bv.shape().to_vec() });
            }
        }
        let rows = xv.len() / inp;
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(rows, inp, out, T::one(), xv.data(), Layout::row_major(0, inp), wv.data(), Layout::row_major(0, out), beta, &mut y, Layout::row_major(0, out));
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let value = Tensor::new(shape, y)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b, rows, inp, out }, &parents))
    }

    fn zip_op(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    /// `a + tile(b)`, where `b` repeats to fill `a` (bias rows, positional tables).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() % bv.len() != 0 {
            return Err(TensorError::Shape { op: "add_tiled", lhs: av.shape().to_vec(), rhs: bv.shape().to_vec() });
        }
        let n = bv.len();
        let mut data = av.data().to_vec();
        for tile in data.chunks_exact_mut(n) {
            add_into(tile, bv.data());
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddTiled { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * c).collect()).unwrap();
        self.push(value, Op::Scale { a, c }, &[a])
    }

    /// Scales row `r` of `a` (viewed as `factors.len()` equal rows) by `factors[r]`.
    pub fn row_scale(&mut self, a: Var, factors: Vec<T>) -> Result<Var> {
        let av = self.value(a);
        if factors.is_empty() || av.len() % factors.len() != 0 {
            return Err(TensorError::Dimension {
                op: "row_scale",
                msg: format!("{} factors do not divide shape {:?}", factors.len(), av.shape()),
            });
        }
        let cols = av.len() / factors.len();
        let mut data = av.data().to_vec();
        for (row, &f) in data.chunks_exact_mut(cols).zip(&factors) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::RowScale { a, factors }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / T::from_usize(av.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid { a }, &[a])
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cdf: Vec<T> = av.data().iter().map(|&x| normal_cdf(x)).collect();
        let data = av.data().iter().zip(&cdf).map(|(&x, &c)| x * c).collect();
        let v = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(v, Op::Gelu { a, cdf }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(TensorError::Precondition { op: "log", msg: "non-positive input".into() });
        }
        let v = self.map(a, |x| x.ln());
        Ok(self.push(v, Op::Log { a }, &[a]))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.map(a, |x| x.max(lo).min(hi));
        self.push(v, Op::Clamp { a, lo, hi }, &[a])
    }

    /// Permutes axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let rank = av.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Dimension { op: "permute", msg: format!("{perm:?} is not a permutation of rank {rank}") });
        }
        let src = permute_index_map(av.shape(), perm);
        let data = src.iter().map(|&s| av.data()[s]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| av.shape()[p]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::Dimension {
            op: "concat",
            msg: "no inputs".into(),
        })?);
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Dimension { op: "concat", msg: format!("axis {axis} out of range for {base:?}") });
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let mut inners = Vec::with_capacity(parts.len());
        let mut extent = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(TensorError::Shape { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            inners.push(s[axis] * tail);
            extent += s[axis];
        }
        let total: usize = inners.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &inner) in parts.iter().zip(&inners) {
                data.extend_from_slice(&self.value(p).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), outer, inners }, parts))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::Dimension {
                op: "narrow",
                msg: format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let extent = s[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * extent + start) * inner;
            data.extend_from_slice(&av.data()[off..off + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Narrow { a, outer, inner, extent, start, len }, &[a]))
    }

    /// Stacks `times` copies along a new leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var> {
        let av = self.value(a);
        let mut data = Vec::with_capacity(av.len() * times);
        for _ in 0..times {
            data.extend_from_slice(av.data());
        }
        let mut shape = vec![times];
        shape.extend_from_slice(av.shape());
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Repeat { a, times }, &[a]))
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
