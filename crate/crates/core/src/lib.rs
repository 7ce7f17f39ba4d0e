pub mod app;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objects;
pub mod ogt;
pub mod params;
pub mod render;
pub mod train;

pub use omg_tensor;

pub use config::{ModelConfig, StreamSpec, RGB_STREAM};
pub use error::{Error, Result};
pub use model::{Batch, OmgFuser, Predictions};
pub use objects::{build_oga_mask, build_patch_object_sets, OgaMask, PatchObjectSets, SegmentationMapSet};
pub use params::{Ctx, ParamId, ParamStore};
