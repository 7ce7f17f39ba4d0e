//! Procedural scenes: a textured background with textured geometric objects.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::objects::SegmentationMapSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize) -> Self {
        SceneConfig { height, width, min_objects: 2, max_objects: 6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    /// Convex polygon, vertices in angular order.
    Polygon { points: Vec<(f64, f64)> },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Polygon { points } => {
                let n = points.len();
                (0..n).all(|i| {
                    let (x0, y0) = points[i];
                    let (x1, y1) = points[(i + 1) % n];
                    (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
                })
            }
        }
    }

    /// Pixel-centre rasterization.
    pub fn rasterize(&self, height: usize, width: usize) -> Vec<bool> {
        (0..height * width).map(|i| self.contains((i % width) as f64 + 0.5, (i / width) as f64 + 0.5)).collect()
    }
}

/// Colour plus a periodic or speckle texture.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub color: [f64; 3],
    pub freq: f64,
    pub angle: f64,
    pub amplitude: f64,
    pub speckle: f64,
}

impl Appearance {
    fn random<R: Rng>(rng: &mut R, avoid: Option<[f64; 3]>) -> Self {
        let mut color = [0.0; 3];
        for _ in 0..16 {
            color = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let far = avoid.map_or(true, |a| color.iter().zip(a).map(|(x, y)| (x - y).abs()).sum::<f64>() > 0.45);
            if far {
                break;
            }
        }
        Appearance {
            color,
            freq: rng.gen_range(0.15..0.9),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            amplitude: rng.gen_range(0.0..0.12),
            speckle: rng.gen_range(0.0..0.06),
        }
    }

    /// Deterministic texture value (speckle excluded).
    fn shade(&self, x: f64, y: f64, c: usize) -> f64 {
        let (s, co) = self.angle.sin_cos();
        let phase = (x * co + y * s) * self.freq;
        self.color[c] + self.amplitude * phase.sin() * (1.0 - 0.3 * c as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub appearance: Appearance,
    /// Pixels where this object is the topmost layer.
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// Planar `[3, H, W]` values in `[0, 1]`.
    pub image: Vec<f32>,
    pub background: Appearance,
    pub objects: Vec<SceneObject>,
    /// Sensor noise level of this scene.
    pub noise: f64,
}

impl Scene {
    pub fn segmentation(&self) -> SegmentationMapSet {
        SegmentationMapSet::new(self.height, self.width, self.objects.iter().map(|o| o.visible.clone()).collect()).expect("maps match the scene")
    }

    /// Background texture plus fresh sensor noise at one pixel.
    pub fn background_value<R: Rng>(&self, rng: &mut R, x: usize, y: usize, c: usize) -> f32 {
        let v = self.background.shade(x as f64, y as f64, c) + gauss(rng) * (self.background.speckle + self.noise);
        v.clamp(0.0, 1.0) as f32
    }
}

/// Standard normal draw by Box-Muller.
pub(crate) fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Quantizes to 8-bit levels, as stored on disk.
pub(crate) fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn random_shape<R: Rng>(rng: &mut R, h: usize, w: usize) -> Shape {
    let m = h.min(w) as f64;
    let r = rng.gen_range(0.09..0.22) * m;
    let cx = rng.gen_range(0.1..0.9) * w as f64;
    let cy = rng.gen_range(0.1..0.9) * h as f64;
    if rng.gen_bool(0.5) {
        let aspect = rng.gen_range(0.55..1.0);
        Shape::Ellipse { cx, cy, rx: r, ry: r * aspect, angle: rng.gen_range(0.0..std::f64::consts::PI) }
    } else {
        let n = rng.gen_range(3..=7);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // keep the polygon reasonably fat: spread the vertex angles
        let offset = rng.gen_range(0.0..std::f64::consts::TAU);
        let points = angles
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let a = 0.5 * a + 0.5 * (offset + std::f64::consts::TAU * i as f64 / n as f64);
                let rr = r * rng.gen_range(0.75..1.15);
                (cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect();
        Shape::Polygon { points }
    }
}

/// Smallest visible area an object may keep after occlusion.
pub const MIN_VISIBLE: usize = 12;

/// Renders a scene with a uniformly drawn object count.
pub fn gen_scene<R: Rng>(rng: &mut R, cfg: &SceneConfig) -> Scene {
    let k = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    gen_scene_with(rng, cfg, k)
}

/// Renders a scene with exactly `k` objects.
pub fn gen_scene_with<R: Rng>(rng: &mut R, cfg: &SceneConfig, k: usize) -> Scene {
    let (h, w) = (cfg.height, cfg.width);
    let background = Appearance::random(rng, None);
    let noise = rng.gen_range(0.005..0.03);
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < k {
        attempts += 1;
        let shape = random_shape(rng, h, w);
        let support = shape.rasterize(h, w);
        let mut trial = owner.clone();
        for (o, &s) in trial.iter_mut().zip(&support) {
            if s {
                *o = Some(objects.len());
            }
        }
        let area = |id: usize| trial.iter().filter(|&&o| o == Some(id)).count();
        let ok = (0..=objects.len()).all(|id| area(id) >= MIN_VISIBLE);
        // keep some background visible
        let covered = trial.iter().filter(|o| o.is_some()).count();
        if (ok && covered * 10 <= h * w * 7) || attempts > 200 {
            if !ok {
                // give up on occlusion constraints rather than loop forever
                attempts = 0;
            }
            owner = trial;
            objects.push(SceneObject { shape, appearance: Appearance::random(rng, Some(background.color)), visible: Vec::new() });
        }
    }
    for (id, obj) in objects.iter_mut().enumerate() {
        obj.visible = owner.iter().map(|&o| o == Some(id)).collect();
    }
    let mut image = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let app = owner[i].map_or(&background, |id| &objects[id].appearance);
            for c in 0..3 {
                let v = app.shade(x as f64, y as f64, c) + gauss(rng) * (app.speckle + noise);
                image[c * h * w + i] = quantize(v as f32);
            }
        }
    }
    Scene { height: h, width: w, image, background, objects, noise }
}
