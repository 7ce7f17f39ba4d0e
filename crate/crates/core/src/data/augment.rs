//! Geometric augmentations applied identically to every per-pixel field.

use rand::Rng;

use super::SampleRecord;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_h: f64,
    pub flip_v: f64,
    /// Draw a rotation by a multiple of 90 degrees (square images only).
    pub rotate: bool,
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_h: 0.5, flip_v: 0.5, rotate: true, crop_scale: (0.7, 1.0) }
    }
}

/// A pixel-coordinate mapping: output `(y, x)` reads input at `src(y, x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
    /// Crop window `(y0, x0, ch, cw)` in input pixels, resized to the full extent.
    pub crop: (f64, f64, f64, f64),
}

impl Warp {
    pub fn identity(h: usize, w: usize) -> Self {
        Warp { flip_h: false, flip_v: false, quarter_turns: 0, crop: (0.0, 0.0, h as f64, w as f64) }
    }

    pub fn draw<R: Rng>(rng: &mut R, cfg: &AugmentConfig, h: usize, w: usize) -> Self {
        let flip_h = rng.gen_bool(cfg.flip_h);
        let flip_v = rng.gen_bool(cfg.flip_v);
        let quarter_turns = if cfg.rotate && h == w { rng.gen_range(0..4) } else { 0 };
        let (lo, hi) = cfg.crop_scale;
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { hi };
        let side = scale.sqrt();
        let (ch, cw) = (side * h as f64, side * w as f64);
        let y0 = rng.gen_range(0.0..=h as f64 - ch);
        let x0 = rng.gen_range(0.0..=w as f64 - cw);
        Warp { flip_h, flip_v, quarter_turns, crop: (y0, x0, ch, cw) }
    }

    /// Continuous source coordinate of output pixel centre `(y, x)`.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (mut y, mut x) = (y, x);
        if self.flip_v {
            y = h - 1 - y;
        }
        if self.flip_h {
            x = w - 1 - x;
        }
        // rotate counter-clockwise in quarter turns (square only)
        for _ in 0..self.quarter_turns {
            let (ny, nx) = (x, h - 1 - y);
            y = ny;
            x = nx;
        }
        let (y0, x0, ch, cw) = self.crop;
        (y0 + (y as f64 + 0.5) * ch / h as f64, x0 + (x as f64 + 0.5) * cw / w as f64)
    }

    fn nearest(&self, h: usize, w: usize) -> Vec<usize> {
        (0..h * w)
            .map(|i| {
                let (sy, sx) = self.source(i / w, i % w, h, w);
                let yy = (sy.floor() as isize).clamp(0, h as isize - 1) as usize;
                let xx = (sx.floor() as isize).clamp(0, w as isize - 1) as usize;
                yy * w + xx
            })
            .collect()
    }

    /// Bilinear weights: four `(index, weight)` taps per output pixel.
    fn bilinear(&self, h: usize, w: usize) -> Vec<[(usize, f32); 4]> {
        (0..h * w)
            .map(|i| {
                let (sy, sx) = self.source(i / w, i % w, h, w);
                let (fy, fx) = ((sy - 0.5).clamp(0.0, (h - 1) as f64), (sx - 0.5).clamp(0.0, (w - 1) as f64));
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
                [
                    (y0 * w + x0, (1.0 - ty) * (1.0 - tx)),
                    (y0 * w + x1, (1.0 - ty) * tx),
                    (y1 * w + x0, ty * (1.0 - tx)),
                    (y1 * w + x1, ty * tx),
                ]
            })
            .collect()
    }

    /// Applies the warp: image and signals are resampled bilinearly, masks and
    /// instance maps by nearest neighbour.
    pub fn apply(&self, rec: &SampleRecord) -> SampleRecord {
        let (h, w) = (rec.height, rec.width);
        let n = h * w;
        let near = self.nearest(h, w);
        let bil = self.bilinear(h, w);
        let smooth = |data: &[f32], planes: usize| -> Vec<f32> {
            let mut out = vec![0.0f32; planes * n];
            for c in 0..planes {
                let src = &data[c * n..(c + 1) * n];
                for (o, taps) in out[c * n..(c + 1) * n].iter_mut().zip(&bil) {
                    *o = taps.iter().map(|&(j, wt)| src[j] * wt).sum::<f32>();
                }
            }
            out
        };
        let pick = |m: &[bool]| -> Vec<bool> { near.iter().map(|&j| m[j]).collect() };
        let mut out = rec.clone();
        out.image = smooth(&rec.image, 3);
        for s in out.signals.iter_mut() {
            s.data = smooth(&s.data, s.channels);
        }
        out.loc = pick(&rec.loc);
        out.det = out.loc.iter().any(|&b| b);
        out.seg.maps = rec.seg.maps.iter().map(|m| pick(m)).filter(|m| m.iter().any(|&b| b)).collect();
        out
    }
}

pub fn augment<R: Rng>(rng: &mut R, cfg: &AugmentConfig, rec: &SampleRecord) -> SampleRecord {
    Warp::draw(rng, cfg, rec.height, rec.width).apply(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_samples, GenConfig, SignalProfile};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec() -> SampleRecord {
        let cfg = GenConfig::new(16, 16, SignalProfile::parse_list("a:0.9").unwrap(), 1);
        gen_samples(&cfg, 2).unwrap().remove(0)
    }

    #[test]
    fn identity_warp_is_lossless() {
        let r = rec();
        assert_eq!(Warp::identity(16, 16).apply(&r), r);
    }

    #[test]
    fn flips_and_turns_permute_pixels() {
        let r = rec();
        for turns in 0..4 {
            let wp = Warp { flip_h: true, flip_v: turns % 2 == 0, quarter_turns: turns, crop: (0.0, 0.0, 16.0, 16.0) };
            let out = wp.apply(&r);
            let mut a = r.image.clone();
            let mut b = out.image.clone();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            assert_eq!(a, b);
            assert_eq!(out.loc.iter().filter(|&&v| v).count(), r.loc.iter().filter(|&&v| v).count());
        }
        // four quarter turns compose to the identity
        let once = Warp { quarter_turns: 1, ..Warp::identity(16, 16) };
        let mut x = r.clone();
        for _ in 0..4 {
            x = once.apply(&x);
        }
        assert_eq!(x, r);
    }

    #[test]
    fn fields_stay_aligned() {
        // a signal equal to the mask must stay equal to the mask under any warp
        let mut r = rec();
        r.signals[0].data = r.loc.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let wp = Warp::draw(&mut rng, &AugmentConfig::default(), 16, 16);
            let out = wp.apply(&r);
            let agree = out.loc.iter().zip(&out.signals[0].data).filter(|(&m, &s)| m == (s >= 0.5)).count();
            assert!(agree >= 256 - 40, "{agree}");
            assert_eq!(out.det, out.loc.iter().any(|&b| b));
        }
    }
}
