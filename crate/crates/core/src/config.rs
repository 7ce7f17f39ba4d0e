//! Model geometry, presets and flags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name reserved for the image stream.
pub const RGB_STREAM: &str = "rgb";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub name: String,
    pub channels: usize,
}

impl StreamSpec {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        StreamSpec { name: name.into(), channels }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Forensic signal streams, in stacking order. The image stream is implicit and comes last.
    pub streams: Vec<StreamSpec>,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ogt_blocks: usize,
    pub tft_blocks: usize,
    pub ldt_blocks: usize,
    pub det_blocks: usize,
    pub p_drop: f64,
    pub positional_embeddings: bool,
    pub stream_embeddings: bool,
    pub ogt_on_rgb: bool,
    pub paper_literal_scaling: bool,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// 64x64 inputs, 8-pixel patches, D=64, two blocks per stage.
    pub fn desk(streams: Vec<StreamSpec>) -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            patch: 8,
            streams,
            dim: 64,
            heads: 4,
            mlp_ratio: 2,
            ogt_blocks: 2,
            tft_blocks: 2,
            ldt_blocks: 2,
            det_blocks: 4,
            p_drop: 0.2,
            positional_embeddings: true,
            stream_embeddings: true,
            ogt_on_rgb: false,
            paper_literal_scaling: false,
            ln_eps: 1e-5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// 224x224 inputs, 16-pixel patches, D=384, six blocks per stage.
    pub fn fidelity(streams: Vec<StreamSpec>) -> Self {
        ModelConfig {
            height: 224,
            width: 224,
            patch: 16,
            dim: 384,
            mlp_ratio: 4,
            ogt_blocks: 6,
            tft_blocks: 6,
            ldt_blocks: 6,
            ..Self::desk(streams)
        }
    }

    /// The smallest useful model: 16x16 inputs, D=8, one block per stage.
    pub fn tiny(streams: Vec<StreamSpec>) -> Self {
        ModelConfig {
            height: 16,
            width: 16,
            patch: 8,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            ogt_blocks: 1,
            tft_blocks: 1,
            ldt_blocks: 1,
            det_blocks: 1,
            ..Self::desk(streams)
        }
    }

    pub fn preset(name: &str, streams: Vec<StreamSpec>) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(streams)),
            "fidelity" => Ok(Self::fidelity(streams)),
            "tiny" => Ok(Self::tiny(streams)),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk, fidelity or tiny)"))),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn signal_count(&self) -> usize {
        self.streams.len()
    }

    /// Stream names in stacking order, image stream last.
    pub fn stream_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.streams.iter().map(|s| s.name.clone()).collect();
        names.push(RGB_STREAM.to_string());
        names
    }

    /// Strides of the four patch-embedding convolutions.
    pub fn embed_strides(&self) -> Vec<usize> {
        let down = self.patch.trailing_zeros() as usize;
        (0..4).map(|i| if i < down { 2 } else { 1 }).collect()
    }

    /// Output channels of the four patch-embedding convolutions.
    pub fn embed_channels(&self) -> Vec<usize> {
        [8, 4, 2, 1].iter().map(|d| (self.dim / d).max(1)).collect()
    }

    /// Strides of the five localization-head transposed convolutions.
    pub fn head_strides(&self) -> Vec<usize> {
        let up = self.patch.trailing_zeros() as usize;
        let ones = 5 - up;
        // stride-1 layers bracket the upsampling stack: first at the token grid, the rest at full resolution
        let lead = ones.min(1);
        (0..5).map(|i| if i >= lead && i < lead + up { 2 } else { 1 }).collect()
    }

    /// Output channels of the five localization-head layers.
    pub fn head_channels(&self) -> Vec<usize> {
        vec![(self.dim / 2).max(1), (self.dim / 4).max(1), (self.dim / 8).max(1), (self.dim / 8).max(1), 1]
    }

    /// Field-by-field differences, formatted `field: self vs other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).unwrap();
        let b = serde_json::to_value(other).unwrap();
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, v)| format!("{k}: {v} vs {}", b[k])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.patch.is_power_of_two() {
            return fail(format!("patch size {} must be a power of two", self.patch));
        }
        if self.patch > 16 {
            return fail(format!("patch size {} needs more than four stride-2 embedding layers", self.patch));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!("patch size {} does not divide {}x{}", self.patch, self.height, self.width));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.ogt_blocks == 0 || self.tft_blocks == 0 || self.ldt_blocks == 0 || self.det_blocks == 0 {
            return fail("block counts must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return fail(format!("p_drop {} outside [0, 1)", self.p_drop));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.streams {
            if s.name == RGB_STREAM || s.name.is_empty() || s.name.contains(['.', '/', ',', ':']) {
                return fail(format!("invalid stream name {:?}", s.name));
            }
            if !seen.insert(&s.name) {
                return fail(format!("duplicate stream name {:?}", s.name));
            }
            if s.channels == 0 {
                return fail(format!("stream {:?} has zero channels", s.name));
            }
        }
        Ok(())
    }
}
