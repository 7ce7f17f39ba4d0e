//! Parameterized building blocks shared by every stage of the network.

use omg_tensor::{AttentionShape, AttnMask, BnMode, Real, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{Ctx, ParamBuilder, ParamId};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, name: &str, inp: usize, out: usize) -> Self {
        Linear { weight: b.xavier(format!("{name}.weight"), &[inp, out], inp, out), bias: b.constant(format!("{name}.bias"), &[out], 0.0) }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        Ok(ctx.g.linear(x, w, Some(b))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm { gain: b.constant(format!("{name}.gain"), &[dim], 1.0), bias: b.constant(format!("{name}.bias"), &[dim], 0.0), eps }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        Ok(ctx.g.layer_norm(x, g, b, T::lit(self.eps))?)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, name: &str, dim: usize, heads: usize, mlp_ratio: usize, eps: f64) -> Self {
        let hidden = dim * mlp_ratio;
        Block {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim, eps),
            q: Linear::new(b, &format!("{name}.attn.q"), dim, dim),
            k: Linear::new(b, &format!("{name}.attn.k"), dim, dim),
            v: Linear::new(b, &format!("{name}.attn.v"), dim, dim),
            proj: Linear::new(b, &format!("{name}.attn.proj"), dim, dim),
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim, eps),
            fc1: Linear::new(b, &format!("{name}.mlp.fc1"), dim, hidden),
            fc2: Linear::new(b, &format!("{name}.mlp.fc2"), hidden, dim),
            heads,
        }
    }

    /// Ids of the two residual-branch output projections.
    pub fn output_projections(&self) -> [&Linear; 2] {
        [&self.proj, &self.fc2]
    }

    fn mlp<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.ln2.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.g.gelu(h);
        let h = self.fc2.forward(ctx, h)?;
        Ok(ctx.g.add(x, h)?)
    }

    /// `x` holds `groups * len` rows; attention runs within each group.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, groups: usize, len: usize, mask: AttnMask<'_, T>) -> Result<Var> {
        let h = self.ln1.forward(ctx, x)?;
        let q = self.q.forward(ctx, h)?;
        let k = self.k.forward(ctx, h)?;
        let v = self.v.forward(ctx, h)?;
        let a = ctx.g.attention(q, k, v, AttentionShape::self_attention(groups, len, self.heads), mask)?;
        let a = self.proj.forward(ctx, a)?;
        let x = ctx.g.add(x, a)?;
        self.mlp(ctx, x)
    }

    /// Same as [`Block::forward`] but only the first token of each group is
    /// computed, as `[groups, D]`. Keys and values still cover every token.
    pub fn forward_first<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, groups: usize, len: usize) -> Result<Var> {
        let d = *ctx.g.shape(x).last().unwrap();
        let h = self.ln1.forward(ctx, x)?;
        let h3 = ctx.g.reshape(h, &[groups, len, d])?;
        let h0 = ctx.g.narrow(h3, 1, 0, 1)?;
        let h0 = ctx.g.reshape(h0, &[groups, d])?;
        let x3 = ctx.g.reshape(x, &[groups, len, d])?;
        let x0 = ctx.g.narrow(x3, 1, 0, 1)?;
        let x0 = ctx.g.reshape(x0, &[groups, d])?;
        let q = self.q.forward(ctx, h0)?;
        let k = self.k.forward(ctx, h)?;
        let v = self.v.forward(ctx, h)?;
        let shape = AttentionShape { groups, q_len: 1, kv_len: len, heads: self.heads };
        let a = ctx.g.attention(q, k, v, shape, AttnMask::None)?;
        let a = self.proj.forward(ctx, a)?;
        let x0 = ctx.g.add(x0, a)?;
        self.mlp(ctx, x0)
    }
}

/// A stack of blocks sharing one attention layout.
#[derive(Clone, Debug)]
pub struct Blocks(pub Vec<Block>);

impl Blocks {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, name: &str, count: usize, dim: usize, heads: usize, mlp_ratio: usize, eps: f64) -> Self {
        Blocks((0..count).map(|i| Block::new(b, &format!("{name}.{i}"), dim, heads, mlp_ratio, eps)).collect())
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, mut x: Var, groups: usize, len: usize, mask: AttnMask<'_, T>) -> Result<Var> {
        for blk in &self.0 {
            x = blk.forward(ctx, x, groups, len, mask)?;
        }
        Ok(x)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Four 3x3 convolutions with ReLU between them, mapping `[B, C, H, W]` to
/// `[B, D, H/p, W/p]`.
#[derive(Clone, Debug)]
pub struct PatchEmbedder {
    pub convs: Vec<(ParamId, ParamId, usize)>,
}

impl PatchEmbedder {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, name: &str, in_channels: usize, channels: &[usize], strides: &[usize]) -> Self {
        let mut cin = in_channels;
        let mut convs = Vec::new();
        for (i, (&cout, &s)) in channels.iter().zip(strides).enumerate() {
            let w = b.kaiming(format!("{name}.conv{i}.weight"), &[cout, cin, 3, 3], cin * 9);
            let bias = b.constant(format!("{name}.conv{i}.bias"), &[cout], 0.0);
            convs.push((w, bias, s));
            cin = cout;
        }
        PatchEmbedder { convs }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, mut x: Var) -> Result<Var> {
        let last = self.convs.len() - 1;
        for (i, &(w, b, s)) in self.convs.iter().enumerate() {
            let (w, b) = (ctx.p(w), ctx.p(b));
            x = ctx.g.conv2d(x, w, Some(b), s)?;
            if i < last {
                x = ctx.g.relu(x);
            }
        }
        Ok(x)
    }
}

/// Batch normalization with running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm {
            gamma: b.constant(format!("{name}.gamma"), &[channels], 1.0),
            beta: b.constant(format!("{name}.beta"), &[channels], 0.0),
            running_mean: b.buffer(format!("{name}.running_mean"), &[channels], 0.0),
            running_var: b.buffer(format!("{name}.running_var"), &[channels], 1.0),
            eps,
            momentum,
        }
    }

    /// Batch statistics in training mode, unless the layer is frozen, in
    /// which case it behaves as in evaluation.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let store = ctx.store();
        let frozen = !store.is_trainable(self.gamma);
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        let eps = T::lit(self.eps);
        if ctx.train && !frozen {
            let (y, stats) = ctx.g.batch_norm(x, gamma, beta, eps, BnMode::Train)?;
            let stats = stats.expect("training mode returns statistics");
            let m = T::lit(self.momentum);
            let blend = |old: &Tensor<T>, new: &[T]| {
                let data = old.data().iter().zip(new).map(|(&o, &n)| (T::one() - m) * o + m * n).collect();
                Tensor::new(old.shape().to_vec(), data).unwrap()
            };
            let mean = blend(store.get(self.running_mean), &stats.mean);
            let var = blend(store.get(self.running_var), &stats.var);
            ctx.push_buffer_update(self.running_mean, mean);
            ctx.push_buffer_update(self.running_var, var);
            Ok(y)
        } else {
            let mode = BnMode::Eval { mean: store.get(self.running_mean).data(), var: store.get(self.running_var).data() };
            Ok(ctx.g.batch_norm(x, gamma, beta, eps, mode)?.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_token_path_matches_full_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ParamBuilder::new(&mut rng);
        let blk = Block::new(&mut b, "blk", 8, 2, 2, 1e-5);
        let store = b.store.cast::<f64>();
        let (groups, len) = (5, 4);
        let x: Vec<f64> = (0..groups * len * 8).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect();
        let x = Tensor::new(vec![groups * len, 8], x).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let xv = ctx.g.constant(x.clone());
        let full = blk.forward(&mut ctx, xv, groups, len, AttnMask::None).unwrap();
        let first = blk.forward_first(&mut ctx, xv, groups, len).unwrap();
        let (full, first) = (ctx.g.value(full).clone(), ctx.g.value(first).clone());
        for gi in 0..groups {
            for c in 0..8 {
                let a = full.data()[gi * len * 8 + c];
                let b = first.data()[gi * 8 + c];
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn embedder_reaches_token_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = ParamBuilder::new(&mut rng);
        let e = PatchEmbedder::new(&mut b, "e", 3, &[2, 4, 8, 16], &[2, 2, 2, 1]);
        let store = b.store;
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.g.constant(Tensor::full(vec![2, 3, 32, 32], 0.5f32));
        let y = e.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.g.shape(y), &[2, 16, 4, 4]);
    }
}
