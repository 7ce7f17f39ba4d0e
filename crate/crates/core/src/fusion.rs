//! Stream stacking, stream drop, and the token fusion module.

use omg_tensor::{AttnMask, Real, Var};
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::layers::Blocks;
use crate::params::{Ctx, ParamBuilder, ParamId};

/// Per-stream token batches, `[B * L, D]` each, in declared order.
#[derive(Clone, Debug)]
pub struct StreamStack {
    pub names: Vec<String>,
    pub tokens: Vec<Var>,
    pub rows: usize,
    pub dim: usize,
}

pub fn stack_streams<T: Real>(ctx: &Ctx<T>, names: &[String], outputs: &[Var]) -> Result<StreamStack> {
    if names.len() != outputs.len() {
        return Err(Error::Input(format!("{} stream names for {} outputs", names.len(), outputs.len())));
    }
    let first = outputs.first().ok_or_else(|| Error::Input("no streams to stack".into()))?;
    let shape = ctx.g.shape(*first).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("stream {} has shape {shape:?}, expected [L, D]", names[0])));
    }
    for (name, &v) in names.iter().zip(outputs) {
        if ctx.g.shape(v) != shape.as_slice() {
            return Err(Error::Dimension(format!("stream {name} has shape {:?}, expected {shape:?}", ctx.g.shape(v))));
        }
    }
    Ok(StreamStack { names: names.to_vec(), tokens: outputs.to_vec(), rows: shape[0], dim: shape[1] })
}

impl StreamStack {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The stack as one `[S, rows, D]` tensor.
    pub fn stacked<T: Real>(&self, ctx: &mut Ctx<T>) -> Result<Var> {
        let parts = self.tokens.iter().map(|&t| ctx.g.reshape(t, &[1, self.rows, self.dim])).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(ctx.g.concat(&parts, 0)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Keep decisions for `samples x streams`, sample-major. Each stream is kept
/// with probability `1 - p`; if a sample loses every stream, one is restored
/// uniformly at random.
pub fn draw_keep(rng: &mut dyn RngCore, samples: usize, streams: usize, p: f64) -> Vec<bool> {
    let mut keep = Vec::with_capacity(samples * streams);
    for _ in 0..samples {
        let row: Vec<bool> = (0..streams).map(|_| rng.gen::<f64>() >= p).collect();
        let start = keep.len();
        keep.extend(row);
        if streams > 0 && !keep[start..].iter().any(|&k| k) {
            let pick = rng.gen_range(0..streams);
            keep[start + pick] = true;
        }
    }
    keep
}

/// Randomly zeroes whole streams per sample, rescaling the survivors by
/// `1 / (1 - p)`, or by `1 / p` when `literal` is set. Identity in eval mode.
pub fn stream_drop<T: Real>(
    ctx: &mut Ctx<T>,
    stack: &StreamStack,
    samples: usize,
    p_drop: f64,
    mode: Mode,
    literal: bool,
    rng: &mut dyn RngCore,
) -> Result<StreamStack> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::Config(format!("p_drop {p_drop} outside [0, 1)")));
    }
    if mode == Mode::Eval || p_drop == 0.0 {
        return Ok(stack.clone());
    }
    if samples == 0 || stack.rows % samples != 0 {
        return Err(Error::Dimension(format!("{} rows do not split into {samples} samples", stack.rows)));
    }
    let s = stack.len();
    let keep = draw_keep(rng, samples, s, p_drop);
    let gain = if literal { 1.0 / p_drop } else { 1.0 / (1.0 - p_drop) };
    let mut out = stack.clone();
    for (i, tok) in out.tokens.iter_mut().enumerate() {
        let factors: Vec<T> = (0..samples).map(|b| if keep[b * s + i] { T::lit(gain) } else { T::zero() }).collect();
        *tok = ctx.g.row_scale(*tok, factors)?;
    }
    Ok(out)
}

/// Fusion token, optional per-stream identity embeddings, TFT and LDT blocks.
#[derive(Clone, Debug)]
pub struct TokenFusion {
    pub fusion_token: ParamId,
    pub stream_embed: Vec<(String, ParamId)>,
    pub tft: Blocks,
    pub ldt: Blocks,
}

impl TokenFusion {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<R>,
        names: &[String],
        stream_embeddings: bool,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        tft_blocks: usize,
        ldt_blocks: usize,
        eps: f64,
    ) -> Self {
        let fusion_token = b.normal("tfm.fusion_token", &[dim], 0.02);
        let stream_embed = if stream_embeddings {
            names.iter().map(|n| (n.clone(), b.normal(format!("tfm.stream_embed.{n}"), &[dim], 0.02))).collect()
        } else {
            Vec::new()
        };
        TokenFusion {
            fusion_token,
            stream_embed,
            tft: Blocks::new(b, "tfm.tft", tft_blocks, dim, heads, mlp_ratio, eps),
            ldt: Blocks::new(b, "tfm.ldt", ldt_blocks, dim, heads, mlp_ratio, eps),
        }
    }

    /// Per patch, runs the sequence `[ft, z_1, .., z_S]` through the TFT and
    /// keeps the fusion slot: `[rows, D]`.
    pub fn tft_forward<T: Real>(&self, ctx: &mut Ctx<T>, stack: &StreamStack) -> Result<Var> {
        let (rows, d) = (stack.rows, stack.dim);
        let seq = stack.len() + 1;
        let ft = ctx.p(self.fusion_token);
        let ft = ctx.g.repeat(ft, rows)?;
        let mut parts = vec![ctx.g.reshape(ft, &[rows, 1, d])?];
        for (i, &tok) in stack.tokens.iter().enumerate() {
            let mut t = tok;
            if !self.stream_embed.is_empty() {
                let name = &stack.names[i];
                let id = self
                    .stream_embed
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|&(_, id)| id)
                    .ok_or_else(|| Error::Input(format!("no identity embedding for stream {name}")))?;
                let e = ctx.p(id);
                t = ctx.g.add_tiled(t, e)?;
            }
            parts.push(ctx.g.reshape(t, &[rows, 1, d])?);
        }
        let x = ctx.g.concat(&parts, 1)?;
        let mut x = ctx.g.reshape(x, &[rows * seq, d])?;
        let (last, rest) = self.tft.0.split_last().expect("at least one fusion block");
        for blk in rest {
            x = blk.forward(ctx, x, rows, seq, AttnMask::None)?;
        }
        last.forward_first(ctx, x, rows, seq)
    }

    /// Full attention over the `L` fused tokens of each sample.
    pub fn ldt_forward<T: Real>(&self, ctx: &mut Ctx<T>, fused: Var, samples: usize) -> Result<Var> {
        let rows = ctx.g.shape(fused)[0];
        if samples == 0 || rows % samples != 0 {
            return Err(Error::Dimension(format!("{rows} fused tokens do not split into {samples} samples")));
        }
        self.ldt.forward(ctx, fused, samples, rows / samples, AttnMask::None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keep_draw_never_drops_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let keep = draw_keep(&mut rng, 1000, 2, 0.9);
        for row in keep.chunks(2) {
            assert!(row.iter().any(|&k| k));
        }
    }

    #[test]
    fn p_drop_of_one_is_rejected() {
        let store = crate::params::ParamStore::<f32>::new();
        let mut ctx = Ctx::new(&store, true);
        let v = ctx.g.constant(omg_tensor::Tensor::full(vec![2, 2], 1.0));
        let stack = stack_streams(&ctx, &["a".into()], &[v]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(stream_drop(&mut ctx, &stack, 1, 1.0, Mode::Train, false, &mut rng).is_err());
    }
}
