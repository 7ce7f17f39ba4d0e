//! Side-by-side panels for qualitative inspection.

use crate::data::SampleRecord;
use crate::error::{Error, Result};

const GAP: usize = 2;
/// Maximum opacity of the red tint at probability 1.
const ALPHA: f32 = 0.6;

/// Planar RGB `[3, H, W]` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Red tint whose opacity follows the probability.
pub fn tint(image: &[f32], prob: &[f32]) -> Vec<f32> {
    let n = prob.len();
    let mut out = image.to_vec();
    for (i, &p) in prob.iter().enumerate() {
        let a = ALPHA * p.clamp(0.0, 1.0);
        out[i] = (1.0 - a) * image[i] + a;
        out[n + i] = (1.0 - a) * image[n + i];
        out[2 * n + i] = (1.0 - a) * image[2 * n + i];
    }
    out
}

fn gray(values: &[f32]) -> Vec<f32> {
    values.repeat(3)
}

/// Image, each single-channel signal, the tinted prediction and, when the
/// record is labeled, the ground-truth mask, left to right on a white strip.
pub fn overlay_strip(rec: &SampleRecord, prob: &[f32], labeled: bool) -> Result<Canvas> {
    let (h, w) = (rec.height, rec.width);
    if prob.len() != h * w {
        return Err(Error::Dimension(format!("prediction has {} pixels, image is {h}x{w}", prob.len())));
    }
    let mut panels = vec![rec.image.clone()];
    panels.extend(rec.signals.iter().filter(|s| s.channels == 1).map(|s| gray(&s.data)));
    panels.push(tint(&rec.image, prob));
    if labeled {
        panels.push(gray(&rec.loc.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>()));
    }
    let width = panels.len() * w + (panels.len() - 1) * GAP;
    let mut data = vec![1.0f32; 3 * h * width];
    for (k, p) in panels.iter().enumerate() {
        let x0 = k * (w + GAP);
        for c in 0..3 {
            for y in 0..h {
                let src = &p[c * h * w + y * w..c * h * w + (y + 1) * w];
                let dst = c * h * width + y * width + x0;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(Canvas { height: h, width, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_samples, GenConfig, SignalProfile};

    #[test]
    fn strip_layout() {
        let cfg = GenConfig::new(16, 16, SignalProfile::parse_list("a:0.7,b:0.6").unwrap(), 1);
        let rec = gen_samples(&cfg, 1).unwrap().remove(0);
        let prob = vec![0.0; 256];
        let c = overlay_strip(&rec, &prob, true).unwrap();
        assert_eq!((c.height, c.width), (16, 5 * 16 + 4 * GAP));
        // zero probability leaves the image untouched in the prediction panel
        let n = 16 * c.width;
        let x0 = 3 * (16 + GAP);
        for ch in 0..3 {
            assert_eq!(c.data[ch * n + x0], rec.image[ch * 256]);
        }
        assert_eq!(tint(&[0.0, 0.0, 0.0], &[1.0]), vec![ALPHA, 0.0, 0.0]);
    }
}
