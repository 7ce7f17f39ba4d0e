//! Synthetic forgery datasets: scenes, manipulations, forensic signals,
//! the on-disk layout and batching.

pub mod augment;
pub mod forgery;
pub mod io;
pub mod scene;
pub mod signal;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use omg_tensor::Tensor;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::objects::{oga_mask_for, SegmentationMapSet};
use crate::train::Targets;
pub use forgery::{apply_forgery, ForgeryKind, Forged};
pub use scene::{gen_scene, gen_scene_with, Scene, SceneConfig};
pub use signal::{gen_signal, NoiseModel, SignalProfile};

/// One forensic signal map, planar `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalMap {
    pub name: String,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// One dataset item.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Planar `[3, H, W]` in `[0, 1]`.
    pub image: Vec<f32>,
    pub signals: Vec<SignalMap>,
    pub seg: SegmentationMapSet,
    pub loc: Vec<bool>,
    pub det: bool,
    pub kind: ForgeryKind,
}

impl SampleRecord {
    pub fn signal(&self, name: &str) -> Option<&SignalMap> {
        self.signals.iter().find(|s| s.name == name)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.image.len() != 3 * n {
            return Err(Error::Dimension(format!("{}: image has {} values, expected 3x{}x{}", self.id, self.image.len(), self.height, self.width)));
        }
        if self.loc.len() != n {
            return Err(Error::Dimension(format!("{}: mask has {} pixels, expected {n}", self.id, self.loc.len())));
        }
        if self.seg.height != self.height || self.seg.width != self.width {
            return Err(Error::Dimension(format!("{}: segmentation extents differ from the image", self.id)));
        }
        for s in &self.signals {
            if s.data.len() != s.channels * n {
                return Err(Error::Dimension(format!("{}: signal {} has {} values, expected {}x{n}", self.id, s.name, s.data.len(), s.channels)));
            }
        }
        if self.det != self.loc.iter().any(|&b| b) {
            return Err(Error::Invariant(format!("{}: detection label disagrees with the mask", self.id)));
        }
        Ok(())
    }

    /// Keeps only the named signals, in the given order.
    pub fn select_signals(&self, names: &[String]) -> Result<SampleRecord> {
        let signals = names
            .iter()
            .map(|n| self.signal(n).cloned().ok_or_else(|| Error::Input(format!("{}: missing signal {n}", self.id))))
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleRecord { signals, ..self.clone() })
    }
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub scene: SceneConfig,
    pub profiles: Vec<SignalProfile>,
    pub forged_ratio: f64,
    /// Erode or dilate each instance map by up to this radius.
    pub seg_noise: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(height: usize, width: usize, profiles: Vec<SignalProfile>, seed: u64) -> Self {
        GenConfig { scene: SceneConfig::new(height, width), profiles, forged_ratio: 0.55, seg_noise: 0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.forged_ratio) {
            return Err(Error::Config(format!("forged ratio {} outside [0, 1]", self.forged_ratio)));
        }
        if self.scene.min_objects == 0 || self.scene.min_objects > self.scene.max_objects {
            return Err(Error::Config("object count range must be non-empty and start at 1 or more".into()));
        }
        if self.scene.height == 0 || self.scene.width == 0 {
            return Err(Error::Config("empty image geometry".into()));
        }
        Ok(())
    }
}

/// Independent stream of randomness for one `(seed, index)` pair.
pub fn derived_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Which of `count` samples are forged: exactly `round(ratio * count)`,
/// placed by a seeded shuffle.
pub fn forged_allocation(count: usize, ratio: f64, seed: u64) -> Vec<bool> {
    let forged = (ratio * count as f64).round() as usize;
    let mut flags: Vec<bool> = (0..count).map(|i| i < forged).collect();
    flags.shuffle(&mut derived_rng(seed, u64::MAX - 1));
    flags
}

fn seg_jitter<R: rand::Rng>(rng: &mut R, maps: &mut [Vec<bool>], h: usize, w: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    for m in maps.iter_mut() {
        let r = rng.gen_range(-(radius as isize)..=radius as isize);
        let out = signal::morph(m, h, w, r.unsigned_abs(), r > 0);
        // never erase an instance entirely
        if out.iter().any(|&b| b) {
            *m = out;
        }
    }
}

/// Generates sample `index` of the dataset described by `cfg`.
pub fn gen_sample(cfg: &GenConfig, index: usize, forged: bool) -> Result<SampleRecord> {
    let mut rng = derived_rng(cfg.seed, index as u64);
    let scene = gen_scene(&mut rng, &cfg.scene);
    let kind = if forged { *ForgeryKind::FORGED.choose(&mut rng).expect("non-empty") } else { ForgeryKind::None };
    let f = apply_forgery(&mut rng, &scene, kind)?;
    let (h, w) = (f.height, f.width);
    let signals = cfg
        .profiles
        .iter()
        .map(|p| SignalMap { name: p.name.clone(), channels: 1, data: gen_signal(&mut rng, &f.loc, h, w, &p.model) })
        .collect();
    let mut maps = f.objects;
    seg_jitter(&mut rng, &mut maps, h, w, cfg.seg_noise);
    let rec = SampleRecord {
        id: format!("sample_{index:05}"),
        height: h,
        width: w,
        image: f.image,
        signals,
        seg: SegmentationMapSet::new(h, w, maps)?,
        det: f.loc.iter().any(|&b| b),
        loc: f.loc,
        kind: f.kind,
    };
    rec.check()?;
    Ok(rec)
}

/// Generates `count` samples in memory.
pub fn gen_samples(cfg: &GenConfig, count: usize) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let flags = forged_allocation(count, cfg.forged_ratio, cfg.seed);
    flags.iter().enumerate().map(|(i, &f)| gen_sample(cfg, i, f)).collect()
}

/// Stacks records into a model batch plus loss targets. Signals are taken in
/// the order of `streams`.
pub fn collate(records: &[&SampleRecord], streams: &[String], patch: usize) -> Result<(Batch<f32>, Targets<f32>)> {
    let first = records.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let n = h * w;
    let b = records.len();
    let mut image = Vec::with_capacity(b * 3 * n);
    let mut loc = Vec::with_capacity(b * n);
    let mut det = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    for r in records {
        if r.height != h || r.width != w {
            return Err(Error::Dimension(format!("{} is {}x{}, batch is {h}x{w}", r.id, r.height, r.width)));
        }
        image.extend_from_slice(&r.image);
        loc.extend(r.loc.iter().map(|&v| if v { 1.0f32 } else { 0.0 }));
        det.push(if r.det { 1.0f32 } else { 0.0 });
        masks.push(oga_mask_for(&r.seg, patch)?);
    }
    let mut signals = Vec::with_capacity(streams.len());
    for name in streams {
        let c = first.signal(name).ok_or_else(|| Error::Input(format!("{}: missing signal {name}", first.id)))?.channels;
        let mut data = Vec::with_capacity(b * c * n);
        for r in records {
            let s = r.signal(name).ok_or_else(|| Error::Input(format!("{}: missing signal {name}", r.id)))?;
            if s.channels != c {
                return Err(Error::Dimension(format!("{}: signal {name} has {} channels, expected {c}", r.id, s.channels)));
            }
            data.extend_from_slice(&s.data);
        }
        signals.push(Tensor::new(vec![b, c, h, w], data)?);
    }
    let batch = Batch { samples: b, image: Tensor::new(vec![b, 3, h, w], image)?, signals, masks };
    let targets = Targets { samples: b, loc, det };
    Ok((batch, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GenConfig {
        GenConfig::new(32, 32, SignalProfile::parse_list("a:0.8,b:0.6").unwrap(), 9)
    }

    #[test]
    fn allocation_is_exact() {
        let f = forged_allocation(1000, 0.55, 3);
        assert_eq!(f.iter().filter(|&&b| b).count(), 550);
        assert_eq!(f, forged_allocation(1000, 0.55, 3));
        assert_ne!(f, forged_allocation(1000, 0.55, 4));
    }

    #[test]
    fn samples_are_consistent_and_seeded() {
        let a = gen_samples(&cfg(), 12).unwrap();
        let b = gen_samples(&cfg(), 12).unwrap();
        assert_eq!(a, b);
        for r in &a {
            r.check().unwrap();
            assert_eq!(r.det, r.kind != ForgeryKind::None);
        }
    }

    #[test]
    fn collate_shapes() {
        let recs = gen_samples(&cfg(), 3).unwrap();
        let refs: Vec<&SampleRecord> = recs.iter().collect();
        let (batch, t) = collate(&refs, &["b".into(), "a".into()], 8).unwrap();
        assert_eq!(batch.image.shape(), &[3, 3, 32, 32]);
        assert_eq!(batch.signals.len(), 2);
        assert_eq!(batch.signals[0].data()[..1024], recs[0].signal("b").unwrap().data[..]);
        assert_eq!(t.loc.len(), 3 * 1024);
        assert!(collate(&refs, &["zz".into()], 8).is_err());
    }
}
