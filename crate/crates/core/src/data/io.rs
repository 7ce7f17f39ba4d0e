//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/sample_00000/image.png          8-bit RGB
//!                    /mask.png           8-bit gray, 0/255
//!                    /label.json         {"det": 0|1, "kind": "..."}
//!                    /seg/inst_000.png   binary 8-bit, one per instance
//!                    /seg_labels.png     (alternative) 16-bit label map
//!                    /signals/<name>.png 8-bit gray, value/255
//!                    /signals/<name>.f32 (alternative) multi-channel raw
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{forged_allocation, gen_sample, ForgeryKind, GenConfig, SampleRecord, SignalMap};
use crate::error::{io_err, Error, Result};
use crate::objects::SegmentationMapSet;

/// Magic of raw multi-channel signal files.
pub const SIGNAL_MAGIC: &[u8; 4] = b"OMGS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Signal names in stream order.
    pub signals: Vec<String>,
    pub samples: Vec<String>,
    pub generator: Option<GenConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Label {
    det: u8,
    kind: ForgeryKind,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image { path: path.display().to_string(), source })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.display().to_string(), source })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&s)?)
}

pub fn gray_png(values: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| Luma([to_u8(values[y as usize * width + x as usize])]));
    save_png(&img, path)
}

pub fn rgb_png(planar: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    let n = height * width;
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        Rgb([to_u8(planar[i]), to_u8(planar[n + i]), to_u8(planar[2 * n + i])])
    });
    save_png(&img, path)
}

/// Writes a `[C, H, W]` map as a raw little-endian signal file.
pub fn write_raw_signal(path: &Path, channels: usize, height: usize, width: usize, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + data.len() * 4);
    bytes.extend_from_slice(SIGNAL_MAGIC);
    for v in [channels, height, width] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_raw_signal(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 16 || &bytes[..4] != SIGNAL_MAGIC {
        return Err(Error::Format(format!("{}: not a raw signal file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (c, h, w) = (word(0), word(1), word(2));
    if bytes.len() != 16 + 4 * c * h * w {
        return Err(Error::Format(format!("{}: {} bytes for a {c}x{h}x{w} signal", path.display(), bytes.len())));
    }
    let data = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok((c, h, w, data))
}

/// Writes one sample directory.
pub fn write_sample(dir: &Path, rec: &SampleRecord) -> Result<()> {
    let (h, w) = (rec.height, rec.width);
    for sub in ["seg", "signals"] {
        fs::create_dir_all(dir.join(sub)).map_err(io_err(dir.join(sub)))?;
    }
    rgb_png(&rec.image, h, w, &dir.join("image.png"))?;
    let mask: Vec<f32> = rec.loc.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    gray_png(&mask, h, w, &dir.join("mask.png"))?;
    write_json(&dir.join("label.json"), &Label { det: u8::from(rec.det), kind: rec.kind })?;
    for (k, m) in rec.seg.maps.iter().enumerate() {
        let v: Vec<f32> = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        gray_png(&v, h, w, &dir.join("seg").join(format!("inst_{k:03}.png")))?;
    }
    for s in &rec.signals {
        if s.channels == 1 {
            gray_png(&s.data, h, w, &dir.join("signals").join(format!("{}.png", s.name)))?;
        } else {
            write_raw_signal(&dir.join("signals").join(format!("{}.f32", s.name)), s.channels, h, w, &s.data)?;
        }
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).map_err(io_err(dir))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    v.sort();
    Ok(v)
}

fn read_binary(path: &Path, h: usize, w: usize) -> Result<Vec<bool>> {
    let img = open_image(path)?.to_luma8();
    if img.dimensions() != (w as u32, h as u32) {
        return Err(Error::Dimension(format!("{}: {:?} but the image is {w}x{h}", path.display(), img.dimensions())));
    }
    Ok(img.pixels().map(|p| p.0[0] >= 128).collect())
}

/// Reads one sample directory. `signal_names` fixes which signals are loaded
/// and in which order; `None` loads every file under `signals/` by name.
pub fn read_sample(dir: &Path, signal_names: Option<&[String]>) -> Result<SampleRecord> {
    read_dir_sample(dir, signal_names, true)
}

/// Reads the model inputs of a sample directory for inference. The mask and
/// label may be absent; without segmentation maps the whole image is one
/// background object.
pub fn read_inputs(dir: &Path, signal_names: &[String]) -> Result<SampleRecord> {
    read_dir_sample(dir, Some(signal_names), false)
}

fn read_dir_sample(dir: &Path, signal_names: Option<&[String]>, labeled: bool) -> Result<SampleRecord> {
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let img = open_image(&dir.join("image.png"))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut image = vec![0.0f32; 3 * n];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            image[c * n + i] = p.0[c] as f32 / 255.0;
        }
    }
    let (mask_path, label_path) = (dir.join("mask.png"), dir.join("label.json"));
    let loc = if labeled || mask_path.is_file() { read_binary(&mask_path, h, w)? } else { vec![false; n] };
    let label: Label = if labeled || label_path.is_file() {
        read_json(&label_path)?
    } else {
        Label { det: u8::from(loc.iter().any(|&b| b)), kind: ForgeryKind::None }
    };
    let seg_dir = dir.join("seg");
    let labels_path = dir.join("seg_labels.png");
    let seg = if seg_dir.is_dir() {
        let maps = sorted_entries(&seg_dir)?
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .map(|p| read_binary(p, h, w))
            .collect::<Result<Vec<_>>>()?;
        SegmentationMapSet::new(h, w, maps)?
    } else if labels_path.is_file() {
        let l = open_image(&labels_path)?.to_luma16();
        if l.dimensions() != (w as u32, h as u32) {
            return Err(Error::Dimension(format!("{}: label map extents differ from the image", labels_path.display())));
        }
        SegmentationMapSet::from_labels(h, w, &l.pixels().map(|p| p.0[0]).collect::<Vec<_>>())?
    } else if !labeled {
        SegmentationMapSet::new(h, w, Vec::new())?
    } else {
        return Err(Error::Input(format!("{id}: no segmentation maps (seg/ or seg_labels.png)")));
    };
    let sig_dir = dir.join("signals");
    let names: Vec<String> = match signal_names {
        Some(n) => n.to_vec(),
        None => {
            let mut v: Vec<String> = if sig_dir.is_dir() {
                sorted_entries(&sig_dir)?.iter().filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned())).collect()
            } else {
                Vec::new()
            };
            v.dedup();
            v
        }
    };
    let mut signals = Vec::with_capacity(names.len());
    for name in &names {
        let png = sig_dir.join(format!("{name}.png"));
        let raw = sig_dir.join(format!("{name}.f32"));
        let sig = if png.is_file() {
            let g = open_image(&png)?.to_luma8();
            if g.dimensions() != (w as u32, h as u32) {
                return Err(Error::Dimension(format!("{id}: signal {name} is {:?}, image is {w}x{h}", g.dimensions())));
            }
            SignalMap { name: name.clone(), channels: 1, data: g.pixels().map(|p| p.0[0] as f32 / 255.0).collect() }
        } else if raw.is_file() {
            let (c, sh, sw, data) = read_raw_signal(&raw)?;
            if (sh, sw) != (h, w) {
                return Err(Error::Dimension(format!("{id}: signal {name} is {sw}x{sh}, image is {w}x{h}")));
            }
            SignalMap { name: name.clone(), channels: c, data }
        } else {
            return Err(Error::Input(format!("{id}: missing signal {name}")));
        };
        signals.push(sig);
    }
    let rec = SampleRecord { id, height: h, width: w, image, signals, seg, det: label.det != 0, loc, kind: label.kind };
    rec.check()?;
    Ok(rec)
}

/// Generates a dataset of `count` samples under `root`.
pub fn gen_dataset(cfg: &GenConfig, count: usize, root: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    fs::create_dir_all(root).map_err(io_err(root))?;
    let flags = forged_allocation(count, cfg.forged_ratio, cfg.seed);
    let mut samples = Vec::with_capacity(count);
    for (i, &forged) in flags.iter().enumerate() {
        let rec = gen_sample(cfg, i, forged)?;
        write_sample(&root.join(&rec.id), &rec)?;
        samples.push(rec.id);
    }
    let manifest = Manifest {
        count,
        height: cfg.scene.height,
        width: cfg.scene.width,
        signals: cfg.profiles.iter().map(|p| p.name.clone()).collect(),
        samples,
        generator: Some(cfg.clone()),
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Loads a dataset. Without a manifest, every subdirectory containing an
/// `image.png` is a sample and signals are discovered per sample.
pub fn load_dataset(root: &Path) -> Result<(Option<Manifest>, Vec<SampleRecord>)> {
    let mpath = root.join("manifest.json");
    if mpath.is_file() {
        let m: Manifest = read_json(&mpath)?;
        let recs = m.samples.iter().map(|s| read_sample(&root.join(s), Some(&m.signals))).collect::<Result<Vec<_>>>()?;
        return Ok((Some(m), recs));
    }
    if !root.is_dir() {
        return Err(Error::Input(format!("{} is not a dataset directory", root.display())));
    }
    let recs = sorted_entries(root)?
        .iter()
        .filter(|p| p.join("image.png").is_file())
        .map(|p| read_sample(p, None))
        .collect::<Result<Vec<_>>>()?;
    if recs.is_empty() {
        return Err(Error::Input(format!("{} contains no samples", root.display())));
    }
    Ok((None, recs))
}
