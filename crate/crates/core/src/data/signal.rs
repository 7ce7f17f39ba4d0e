//! Synthetic forensic signals of controllable reliability.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{gauss, quantize};
use crate::error::{Error, Result};

/// Corruption applied to a ground-truth mask to obtain a score map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Probability that a tampered region is missed entirely.
    pub miss: f64,
    /// Largest dilation/erosion radius; the applied radius is a rounded
    /// uniform draw in `[0, radius]` with a random sign.
    pub radius: f64,
    /// Expected number of false-positive blobs.
    pub fp_blobs: f64,
    pub blob_radius: f64,
    /// Gaussian blur sigma in pixels.
    pub blur: f64,
    /// Additive pixel noise sigma.
    pub noise: f64,
    /// Margin between the score levels of marked and unmarked pixels and 0/1.
    pub margin: f64,
    /// Probability that the whole map is unrelated noise.
    pub failure: f64,
}

impl NoiseModel {
    pub const CLEAN: NoiseModel =
        NoiseModel { miss: 0.0, radius: 0.0, fp_blobs: 0.0, blob_radius: 0.0, blur: 0.0, noise: 0.0, margin: 0.0, failure: 0.0 };

    /// The one-parameter corruption family: level 0 is the clean mask, level 1
    /// is unrelated noise.
    pub fn at_level(level: f64) -> Self {
        let l = level.clamp(0.0, 1.0);
        NoiseModel {
            miss: 0.35 * l,
            radius: 4.0 * l,
            fp_blobs: 2.5 * l,
            blob_radius: 2.0 + 5.0 * l,
            blur: 1.5 * l,
            noise: 0.22 * l,
            margin: (3.0 * l).min(1.0) * 0.2,
            failure: l * l * l,
        }
    }
}

/// Level/mean-F1 pairs measured on 1000 forged 64x64 samples
/// (`examples/signal_calibration.rs`).
pub const CALIBRATION: [(f64, f64); 21] = [
    (0.0, 1.0000),
    (0.05, 0.9772),
    (0.1, 0.9556),
    (0.15, 0.8948),
    (0.2, 0.8357),
    (0.25, 0.7956),
    (0.3, 0.7471),
    (0.35, 0.6971),
    (0.4, 0.6462),
    (0.45, 0.5927),
    (0.5, 0.5278),
    (0.55, 0.4599),
    (0.6, 0.3989),
    (0.65, 0.3236),
    (0.7, 0.2589),
    (0.75, 0.2102),
    (0.8, 0.1591),
    (0.85, 0.1310),
    (0.9, 0.1020),
    (0.95, 0.0693),
    (1.0, 0.0412),
];

/// Corruption level expected to give mean pixel-F1 `rho`, by inverting
/// [`CALIBRATION`] piecewise linearly.
pub fn level_for(rho: f64) -> f64 {
    let rho = rho.clamp(0.0, 1.0);
    for w in CALIBRATION.windows(2) {
        let ((l0, f0), (l1, f1)) = (w[0], w[1]);
        if rho <= f0 && rho >= f1 {
            return if f0 == f1 { l0 } else { l0 + (f0 - rho) / (f0 - f1) * (l1 - l0) };
        }
    }
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalProfile {
    pub name: String,
    pub reliability: f64,
    pub model: NoiseModel,
}

impl SignalProfile {
    pub fn calibrated(name: impl Into<String>, reliability: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&reliability) {
            return Err(Error::Config(format!("reliability {reliability} outside [0, 1]")));
        }
        Ok(SignalProfile { name: name.into(), reliability, model: NoiseModel::at_level(level_for(reliability)) })
    }

    /// Parses `name:rho[,name:rho..]`.
    pub fn parse_list(spec: &str) -> Result<Vec<Self>> {
        let mut out: Vec<SignalProfile> = Vec::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, rho) = item.split_once(':').ok_or_else(|| Error::Config(format!("profile {item:?} is not name:reliability")))?;
            let rho: f64 = rho.trim().parse().map_err(|_| Error::Config(format!("bad reliability in {item:?}")))?;
            let name = name.trim();
            if name.is_empty() || name == crate::RGB_STREAM || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!("invalid signal name {name:?}")));
            }
            if out.iter().any(|p| p.name == name) {
                return Err(Error::Config(format!("duplicate signal name {name:?}")));
            }
            out.push(Self::calibrated(name, rho)?);
        }
        if out.is_empty() {
            return Err(Error::Config("no signal profiles given".into()));
        }
        Ok(out)
    }
}

fn disc_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                v.push((dx, dy));
            }
        }
    }
    v
}

/// Binary dilation (`grow`) or erosion by a disc.
pub(crate) fn morph(mask: &[bool], h: usize, w: usize, r: usize, grow: bool) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let offs = disc_offsets(r);
    let at = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask[y as usize * w + x as usize];
    (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            if grow {
                offs.iter().any(|&(dx, dy)| at(x + dx, y + dy))
            } else {
                offs.iter().all(|&(dx, dy)| at(x + dx, y + dy))
            }
        })
        .collect()
}

/// 4-connected components, as lists of pixel indices.
pub(crate) fn components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y) = (i % w, i / w);
            let mut push = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        out.push(comp);
    }
    out
}

fn gaussian_blur(map: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (j, &kv) in k.iter().enumerate() {
                    let d = j as isize - r;
                    let (sx, sy) = if horizontal { (x + d, y) } else { (x, y + d) };
                    if sx >= 0 && sy >= 0 && sx < w as isize && sy < h as isize {
                        acc += kv * src[(sy * w as isize + sx) as usize];
                        norm += kv;
                    }
                }
                out[(y * w as isize + x) as usize] = acc / norm;
            }
        }
        out
    };
    let tmp = pass(map, true);
    let out = pass(&tmp, false);
    map.copy_from_slice(&out);
}

/// Unrelated noise: about one pixel in twenty score above one half.
fn noise_map<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| quantize(if rng.gen_bool(0.05) { rng.gen_range(0.5..1.0) } else { rng.gen_range(0.0..0.5) } as f32)).collect()
}

/// Corrupts the ground-truth mask `loc` into a score map in `[0, 1]`.
pub fn gen_signal<R: Rng>(rng: &mut R, loc: &[bool], height: usize, width: usize, model: &NoiseModel) -> Vec<f32> {
    let n = height * width;
    debug_assert_eq!(loc.len(), n);
    if model.failure > 0.0 && rng.gen_bool(model.failure.min(1.0)) {
        return noise_map(rng, n);
    }
    let mut m = loc.to_vec();
    if model.miss > 0.0 {
        for comp in components(loc, height, width) {
            if rng.gen_bool(model.miss.min(1.0)) {
                for i in comp {
                    m[i] = false;
                }
            }
        }
    }
    if model.radius > 0.0 {
        let r = (rng.gen::<f64>() * model.radius).round() as usize;
        m = morph(&m, height, width, r, rng.gen_bool(0.5));
    }
    if model.fp_blobs > 0.0 {
        // Poisson count by inversion
        let (mut count, mut p, limit) = (0usize, 1.0f64, (-model.fp_blobs).exp());
        loop {
            p *= rng.gen::<f64>();
            if p <= limit {
                break;
            }
            count += 1;
        }
        for _ in 0..count {
            let r = rng.gen_range(1.0..=model.blob_radius.max(1.0));
            let (cx, cy) = (rng.gen_range(0.0..width as f64), rng.gen_range(0.0..height as f64));
            for (i, v) in m.iter_mut().enumerate() {
                let (dx, dy) = ((i % width) as f64 + 0.5 - cx, (i / width) as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    *v = true;
                }
            }
        }
    }
    let (lo, hi) = (model.margin, 1.0 - model.margin);
    let mut s: Vec<f64> = m.iter().map(|&b| if b { hi } else { lo }).collect();
    gaussian_blur(&mut s, height, width, model.blur);
    if model.noise > 0.0 {
        for v in s.iter_mut() {
            *v += gauss(rng) * model.noise;
        }
    }
    s.iter().map(|&v| quantize(v as f32)).collect()
}
