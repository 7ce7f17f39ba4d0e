//! Forgery operators applied to rendered scenes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{gauss, gen_scene_with, quantize, Scene, SceneConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryKind {
    Splice,
    CopyMove,
    Inpaint,
    None,
}

impl ForgeryKind {
    pub const FORGED: [ForgeryKind; 3] = [ForgeryKind::Splice, ForgeryKind::CopyMove, ForgeryKind::Inpaint];

    pub fn name(self) -> &'static str {
        match self {
            ForgeryKind::Splice => "splice",
            ForgeryKind::CopyMove => "copy_move",
            ForgeryKind::Inpaint => "inpaint",
            ForgeryKind::None => "none",
        }
    }
}

/// A scene after manipulation, with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Forged {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    /// Visible object maps after the edit.
    pub objects: Vec<Vec<bool>>,
    /// Support of the edited region.
    pub loc: Vec<bool>,
    pub kind: ForgeryKind,
}

impl Forged {
    pub fn is_forged(&self) -> bool {
        self.loc.iter().any(|&b| b)
    }
}

/// Translates `support` by `(dx, dy)`; pixels leaving the frame are dropped.
fn shifted(support: &[bool], h: usize, w: usize, dx: isize, dy: isize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if support[y * w + x] {
                let (tx, ty) = (x as isize + dx, y as isize + dy);
                if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                    out.push((y * w + x, ty as usize * w + tx as usize));
                }
            }
        }
    }
    out
}

fn random_shift<R: Rng>(rng: &mut R, h: usize, w: usize) -> (isize, isize) {
    let (mh, mw) = (h as isize / 2, w as isize / 2);
    loop {
        let dx = rng.gen_range(-mw..=mw);
        let dy = rng.gen_range(-mh..=mh);
        if dx.abs() + dy.abs() >= (h.min(w) / 6) as isize {
            return (dx, dy);
        }
    }
}

/// Pastes `(source, dest)` pixel pairs from `src` into `target` and
/// records them as a new topmost object.
fn paste(target: &mut Forged, src: &[f32], pairs: &[(usize, usize)]) {
    let plane = target.height * target.width;
    let mut new_obj = vec![false; plane];
    for &(s, d) in pairs {
        for c in 0..3 {
            target.image[c * plane + d] = src[c * plane + s];
        }
        new_obj[d] = true;
        target.loc[d] = true;
    }
    for m in &mut target.objects {
        for (v, &n) in m.iter_mut().zip(&new_obj) {
            *v &= !n;
        }
    }
    target.objects.retain(|m| m.iter().any(|&b| b));
    target.objects.push(new_obj);
}

fn unchanged(scene: &Scene, kind: ForgeryKind) -> Forged {
    Forged {
        height: scene.height,
        width: scene.width,
        image: scene.image.clone(),
        objects: scene.objects.iter().map(|o| o.visible.clone()).collect(),
        loc: vec![false; scene.height * scene.width],
        kind,
    }
}

/// Smallest tampered area accepted for a forged sample: 16 pixels, or 1/64
/// of the image when that is smaller.
pub fn min_tampered(height: usize, width: usize) -> usize {
    (height * width / 64).clamp(1, 16)
}

/// Applies one manipulation. `loc` is the support of the edited region.
/// Retries placement until at least [`min_tampered`] pixels are edited.
pub fn apply_forgery<R: Rng>(rng: &mut R, scene: &Scene, kind: ForgeryKind) -> Result<Forged> {
    let (h, w) = (scene.height, scene.width);
    if kind == ForgeryKind::None {
        return Ok(unchanged(scene, kind));
    }
    if scene.objects.is_empty() {
        return Err(Error::Input(format!("{} needs at least one object in the scene", kind.name())));
    }
    let need = min_tampered(h, w);
    for _ in 0..256 {
        let mut out = unchanged(scene, kind);
        match kind {
            ForgeryKind::Splice => {
                // donor scene with its own content and sensor statistics
                let cfg = SceneConfig { height: h, width: w, min_objects: 1, max_objects: 3 };
                let k = rng.gen_range(1..=3);
                let mut donor = gen_scene_with(rng, &cfg, k);
                let gain = rng.gen_range(0.75..1.25) as f32;
                let extra = rng.gen_range(0.02..0.06);
                for v in donor.image.iter_mut() {
                    *v = quantize(*v * gain + (gauss(rng) * extra) as f32);
                }
                let obj = &donor.objects[rng.gen_range(0..donor.objects.len())];
                let (dx, dy) = (rng.gen_range(-(w as isize) / 3..=w as isize / 3), rng.gen_range(-(h as isize) / 3..=h as isize / 3));
                let pairs = shifted(&obj.visible, h, w, dx, dy);
                paste(&mut out, &donor.image, &pairs);
            }
            ForgeryKind::CopyMove => {
                let obj = &scene.objects[rng.gen_range(0..scene.objects.len())];
                let (dx, dy) = random_shift(rng, h, w);
                let pairs = shifted(&obj.visible, h, w, dx, dy);
                let src = scene.image.clone();
                paste(&mut out, &src, &pairs);
            }
            ForgeryKind::Inpaint => {
                let id = rng.gen_range(0..scene.objects.len());
                let plane = h * w;
                let region = scene.objects[id].visible.clone();
                for (i, &r) in region.iter().enumerate() {
                    if r {
                        for c in 0..3 {
                            out.image[c * plane + i] = quantize(scene.background_value(rng, i % w, i / w, c));
                        }
                    }
                }
                out.loc = region;
                out.objects.remove(id);
            }
            ForgeryKind::None => unreachable!(),
        }
        if out.loc.iter().filter(|&&b| b).count() >= need {
            return Ok(out);
        }
    }
    Err(Error::Invariant(format!("no {} placement edits {need} pixels", kind.name())))
}
