//! Object-guided attention and the object-guided transformer.

use omg_tensor::{AttentionShape, AttnMask, Real, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Block, Blocks};
use crate::objects::OgaMask;
use crate::params::{Ctx, ParamBuilder};

/// Additive masks of a batch, concatenated sample after sample.
#[derive(Clone, Debug)]
pub struct MaskBatch<T> {
    pub samples: usize,
    pub len: usize,
    pub values: Vec<T>,
}

impl<T: Real> MaskBatch<T> {
    pub fn new(masks: &[&OgaMask]) -> Result<Self> {
        let len = masks.first().map(|m| m.len()).ok_or_else(|| Error::Input("empty mask batch".into()))?;
        let mut values = Vec::with_capacity(masks.len() * len * len);
        for (i, m) in masks.iter().enumerate() {
            if m.len() != len {
                return Err(Error::Dimension(format!("mask {i} covers {} patches, expected {len}", m.len())));
            }
            m.extend_additive(&mut values);
        }
        Ok(MaskBatch { samples: masks.len(), len, values })
    }

    pub fn attn(&self) -> AttnMask<'_, T> {
        AttnMask::PerGroup(&self.values)
    }
}

/// The attention sub-layer of `block` on `z` (`[B * L, D]`) under per-sample
/// masks: per head `softmax((Q K^T + M) / sqrt(D_h)) V`, heads concatenated
/// and projected. No normalization or residual.
pub fn oga_attention<T: Real>(ctx: &mut Ctx<T>, z: Var, masks: &MaskBatch<T>, block: &Block) -> Result<Var> {
    let q = block.q.forward(ctx, z)?;
    let k = block.k.forward(ctx, z)?;
    let v = block.v.forward(ctx, z)?;
    let shape = AttentionShape::self_attention(masks.samples, masks.len, block.heads);
    let a = ctx.g.attention(q, k, v, shape, masks.attn())?;
    block.proj.forward(ctx, a)
}

/// `B_1` pre-norm blocks whose attention is restricted by the object mask.
#[derive(Clone, Debug)]
pub struct ObjectGuidedTransformer {
    pub blocks: Blocks,
}

impl ObjectGuidedTransformer {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, name: &str, count: usize, dim: usize, heads: usize, mlp_ratio: usize, eps: f64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(ObjectGuidedTransformer { blocks: Blocks::new(b, name, count, dim, heads, mlp_ratio, eps) })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, z: Var, masks: &MaskBatch<T>) -> Result<Var> {
        self.blocks.forward(ctx, z, masks.samples, masks.len, masks.attn())
    }
}
