//! The assembled network: signal streams, image stream, fusion, heads.

use omg_tensor::{AttnMask, Real, Tensor, Var};
use rand::{Rng, RngCore};

use crate::config::{ModelConfig, RGB_STREAM};
use crate::error::{Error, Result};
use crate::fusion::{stack_streams, stream_drop, Mode, StreamStack, TokenFusion};
use crate::layers::{BatchNorm, Blocks, Block, LayerNorm, Linear, PatchEmbedder};
use crate::objects::OgaMask;
use crate::ogt::{MaskBatch, ObjectGuidedTransformer};
use crate::params::{Ctx, ParamBuilder, ParamId, ParamStore};

/// One forensic signal stream: patch embedder, positions, object-guided transformer.
#[derive(Clone, Debug)]
pub struct SignalStream {
    pub name: String,
    pub channels: usize,
    pub embed: PatchEmbedder,
    pub pos: Option<ParamId>,
    pub ogt: ObjectGuidedTransformer,
}

/// Trainable stand-in for a pretrained image backbone.
#[derive(Clone, Debug)]
pub struct RgbStream {
    pub embed: PatchEmbedder,
    pub pos: Option<ParamId>,
    pub blocks: Blocks,
}

#[derive(Clone, Debug)]
pub struct LocalizationHead {
    /// `(weight, bias, stride, batch norm for all but the last layer)`.
    pub layers: Vec<(ParamId, ParamId, usize, Option<BatchNorm>)>,
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub cls: ParamId,
    pub blocks: Blocks,
    pub norm: LayerNorm,
    pub fc: Linear,
}

#[derive(Clone, Debug)]
pub struct OmgFuser {
    pub config: ModelConfig,
    pub signals: Vec<SignalStream>,
    pub rgb: RgbStream,
    pub fusion: TokenFusion,
    pub loc: LocalizationHead,
    pub det: DetectionHead,
}

/// Model inputs for `samples` images. Signals follow the configured stream order.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub samples: usize,
    /// `[B, 3, H, W]`.
    pub image: Tensor<T>,
    /// One `[B, C_i, H, W]` tensor per signal stream.
    pub signals: Vec<Tensor<T>>,
    /// One object mask per sample.
    pub masks: Vec<OgaMask>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Predictions {
    /// `[B, H * W]` localization probabilities.
    pub loc: Var,
    /// `[B]` detection scores.
    pub det: Var,
    /// Stream tokens before stream drop, `[B * L, D]` each, signals then image.
    pub stream_tokens: Vec<Var>,
    pub fused: Var,
    pub forensic: Var,
}

fn pos_embed<R: Rng>(b: &mut ParamBuilder<R>, on: bool, name: &str, l: usize, d: usize) -> Option<ParamId> {
    on.then(|| b.normal(name, &[l, d], 0.02))
}

impl OmgFuser {
    /// Builds the network and a freshly initialized parameter store.
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<(OmgFuser, ParamStore<f32>)> {
        config.validate()?;
        let c = &config;
        let (l, d) = (c.tokens(), c.dim);
        let mut b = ParamBuilder::new(rng);
        let mut signals = Vec::new();
        for s in &c.streams {
            let pre = format!("fss.{}", s.name);
            signals.push(SignalStream {
                name: s.name.clone(),
                channels: s.channels,
                embed: PatchEmbedder::new(&mut b, &format!("{pre}.embed"), s.channels, &c.embed_channels(), &c.embed_strides()),
                pos: pos_embed(&mut b, c.positional_embeddings, &format!("{pre}.pos"), l, d),
                ogt: ObjectGuidedTransformer::new(&mut b, &format!("{pre}.ogt"), c.ogt_blocks, d, c.heads, c.mlp_ratio, c.ln_eps)?,
            });
        }
        let rgb = RgbStream {
            embed: PatchEmbedder::new(&mut b, "rgb.embed", 3, &c.embed_channels(), &c.embed_strides()),
            pos: pos_embed(&mut b, c.positional_embeddings, "rgb.pos", l, d),
            blocks: Blocks::new(&mut b, "rgb.blocks", c.ogt_blocks, d, c.heads, c.mlp_ratio, c.ln_eps),
        };
        let fusion = TokenFusion::new(&mut b, &c.stream_names(), c.stream_embeddings, d, c.heads, c.mlp_ratio, c.tft_blocks, c.ldt_blocks, c.ln_eps);
        let mut layers = Vec::new();
        let mut cin = d;
        let (strides, chans) = (c.head_strides(), c.head_channels());
        for (i, (&s, &cout)) in strides.iter().zip(&chans).enumerate() {
            let w = b.kaiming(format!("loc.layer{i}.weight"), &[cin, cout, 3, 3], cin * 9);
            let bias = b.constant(format!("loc.layer{i}.bias"), &[cout], 0.0);
            let bn = (i + 1 < strides.len()).then(|| BatchNorm::new(&mut b, &format!("loc.layer{i}.bn"), cout, c.bn_eps, c.bn_momentum));
            layers.push((w, bias, s, bn));
            cin = cout;
        }
        let det = DetectionHead {
            cls: b.normal("det.cls", &[d], 0.02),
            blocks: Blocks::new(&mut b, "det.blocks", c.det_blocks, d, c.heads, c.mlp_ratio, c.ln_eps),
            norm: LayerNorm::new(&mut b, "det.norm", d, c.ln_eps),
            fc: Linear::new(&mut b, "det.fc", d, 1),
        };
        let model = OmgFuser { config, signals, rgb, fusion, loc: LocalizationHead { layers }, det };
        Ok((model, b.store))
    }

    /// Every block of the network, for probes that reset output projections.
    pub fn all_blocks(&self) -> Vec<&Block> {
        let mut out: Vec<&Block> = Vec::new();
        for s in &self.signals {
            out.extend(&s.ogt.blocks.0);
        }
        out.extend(&self.rgb.blocks.0);
        out.extend(&self.fusion.tft.0);
        out.extend(&self.fusion.ldt.0);
        out.extend(&self.det.blocks.0);
        out
    }

    fn check_batch<T: Real>(&self, batch: &Batch<T>) -> Result<()> {
        let c = &self.config;
        let n = batch.samples;
        let want = |ch: usize| vec![n, ch, c.height, c.width];
        if batch.image.shape() != want(3).as_slice() {
            return Err(Error::Input(format!("image has shape {:?}, expected {:?}", batch.image.shape(), want(3))));
        }
        if batch.signals.len() != self.signals.len() {
            let missing: Vec<&str> = self.signals.iter().skip(batch.signals.len()).map(|s| s.name.as_str()).collect();
            return Err(Error::Input(format!("{} signals supplied for {} streams (missing {missing:?})", batch.signals.len(), self.signals.len())));
        }
        for (s, t) in self.signals.iter().zip(&batch.signals) {
            if t.shape() != want(s.channels).as_slice() {
                return Err(Error::Input(format!("signal {} has shape {:?}, expected {:?}", s.name, t.shape(), want(s.channels))));
            }
        }
        if batch.masks.len() != n {
            return Err(Error::Input(format!("{} object masks for {n} samples", batch.masks.len())));
        }
        for (i, m) in batch.masks.iter().enumerate() {
            if m.len() != c.tokens() {
                return Err(Error::Input(format!("object mask {i} covers {} patches, expected {}", m.len(), c.tokens())));
            }
        }
        Ok(())
    }

    /// `[B, C, H, W]` image to `[B * L, D]` tokens plus positions.
    fn embed_tokens<T: Real>(&self, ctx: &mut Ctx<T>, embed: &PatchEmbedder, pos: Option<ParamId>, x: Var) -> Result<Var> {
        let (l, d) = (self.config.tokens(), self.config.dim);
        let y = embed.forward(ctx, x)?;
        let b = ctx.g.shape(y)[0];
        let y = ctx.g.permute(y, &[0, 2, 3, 1])?;
        let mut z = ctx.g.reshape(y, &[b * l, d])?;
        if let Some(p) = pos {
            let p = ctx.p(p);
            z = ctx.g.add_tiled(z, p)?;
        }
        Ok(z)
    }

    pub fn fss_forward<T: Real>(&self, ctx: &mut Ctx<T>, stream: usize, signal: Var, masks: &MaskBatch<T>) -> Result<Var> {
        let s = &self.signals[stream];
        let z = self.embed_tokens(ctx, &s.embed, s.pos, signal)?;
        s.ogt.forward(ctx, z, masks)
    }

    pub fn rgb_stream_forward<T: Real>(&self, ctx: &mut Ctx<T>, image: Var, masks: &MaskBatch<T>) -> Result<Var> {
        let z = self.embed_tokens(ctx, &self.rgb.embed, self.rgb.pos, image)?;
        let mask = if self.config.ogt_on_rgb { masks.attn() } else { AttnMask::None };
        self.rgb.blocks.forward(ctx, z, masks.samples, masks.len, mask)
    }

    /// `[B * L, D]` forensic tokens to `[B, H * W]` probabilities.
    pub fn localization_head<T: Real>(&self, ctx: &mut Ctx<T>, tokens: Var, samples: usize) -> Result<Var> {
        let c = &self.config;
        let (gh, gw) = c.grid();
        let x = ctx.g.reshape(tokens, &[samples, gh, gw, c.dim])?;
        let mut x = ctx.g.permute(x, &[0, 3, 1, 2])?;
        for (w, b, s, bn) in &self.loc.layers {
            let (w, b) = (ctx.p(*w), ctx.p(*b));
            x = ctx.g.conv_transpose2d(x, w, Some(b), *s)?;
            match bn {
                Some(bn) => {
                    x = ctx.g.relu(x);
                    x = bn.forward(ctx, x)?;
                }
                None => x = ctx.g.sigmoid(x),
            }
        }
        let x = clamp_prob(ctx, x);
        Ok(ctx.g.reshape(x, &[samples, c.height * c.width])?)
    }

    /// `[B * L, D]` forensic tokens to `[B]` scores via a prepended class token.
    pub fn detection_head<T: Real>(&self, ctx: &mut Ctx<T>, tokens: Var, samples: usize) -> Result<Var> {
        let d = self.config.dim;
        let l = ctx.g.shape(tokens)[0] / samples;
        let cls = ctx.p(self.det.cls);
        let cls = ctx.g.repeat(cls, samples)?;
        let cls = ctx.g.reshape(cls, &[samples, 1, d])?;
        let t = ctx.g.reshape(tokens, &[samples, l, d])?;
        let x = ctx.g.concat(&[cls, t], 1)?;
        let mut x = ctx.g.reshape(x, &[samples * (l + 1), d])?;
        let (last, rest) = self.det.blocks.0.split_last().expect("at least one detection block");
        for blk in rest {
            x = blk.forward(ctx, x, samples, l + 1, AttnMask::None)?;
        }
        let z = last.forward_first(ctx, x, samples, l + 1)?;
        let z = self.det.norm.forward(ctx, z)?;
        let z = self.det.fc.forward(ctx, z)?;
        let z = ctx.g.sigmoid(z);
        let z = clamp_prob(ctx, z);
        Ok(ctx.g.reshape(z, &[samples])?)
    }

    /// Full forward pass. Stream drop runs only when `drop_rng` is given and
    /// the context is in training mode.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, batch: &Batch<T>, drop_rng: Option<&mut dyn RngCore>) -> Result<Predictions> {
        self.check_batch(batch)?;
        let n = batch.samples;
        let masks: Vec<&OgaMask> = batch.masks.iter().collect();
        // one mask buffer per sample, shared by every stream
        let masks = MaskBatch::<T>::new(&masks)?;
        let mut tokens = Vec::with_capacity(self.signals.len() + 1);
        for (i, sig) in batch.signals.iter().enumerate() {
            let x = ctx.g.constant(sig.clone());
            tokens.push(self.fss_forward(ctx, i, x, &masks)?);
        }
        let image = ctx.g.constant(batch.image.clone());
        tokens.push(self.rgb_stream_forward(ctx, image, &masks)?);
        let names = self.config.stream_names();
        let stack = stack_streams(ctx, &names, &tokens)?;
        let stack = match drop_rng {
            Some(rng) if ctx.train => {
                let mode = Mode::Train;
                stream_drop(ctx, &stack, n, self.config.p_drop, mode, self.config.paper_literal_scaling, rng)?
            }
            _ => stack,
        };
        let fused = self.fusion.tft_forward(ctx, &stack)?;
        let forensic = self.fusion.ldt_forward(ctx, fused, n)?;
        let loc = self.localization_head(ctx, forensic, n)?;
        let det = self.detection_head(ctx, forensic, n)?;
        Ok(Predictions { loc, det, stream_tokens: tokens, fused, forensic })
    }

    /// Index of a stream in stacking order (the image stream is last).
    pub fn stream_index(&self, name: &str) -> Option<usize> {
        if name == RGB_STREAM {
            return Some(self.signals.len());
        }
        self.signals.iter().position(|s| s.name == name)
    }

    /// Ids of all parameters owned by one signal stream, identity embedding included.
    pub fn stream_param_ids(&self, store: &ParamStore<f32>, name: &str) -> Vec<ParamId> {
        let fss = format!("fss.{name}.");
        let emb = format!("tfm.stream_embed.{name}");
        store.ids().filter(|&id| store.name(id).starts_with(&fss) || store.name(id) == emb).collect()
    }
}

/// Keeps probabilities away from exact 0 and 1.
fn clamp_prob<T: Real>(ctx: &mut Ctx<T>, x: Var) -> Var {
    let eps = T::lit(omg_tensor::PROB_EPS);
    ctx.g.clamp(x, eps, T::one() - eps)
}

/// Stream tokens as `StreamStack`, for callers composing the stages by hand.
pub fn stack_of<T: Real>(ctx: &Ctx<T>, model: &OmgFuser, tokens: &[Var]) -> Result<StreamStack> {
    stack_streams(ctx, &model.config.stream_names(), tokens)
}
