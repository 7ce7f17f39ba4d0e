//! Adding a forensic signal stream to a trained model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::config::{ModelConfig, StreamSpec, RGB_STREAM};
use crate::error::{Error, Result};
use crate::model::OmgFuser;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpandMode {
    /// Train only the new stream; everything else stays frozen.
    StreamOnly,
    /// Train everything, starting from the old weights.
    FineTune,
    /// Fresh initialization, full budget.
    FromScratch,
}

impl ExpandMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stream-only" | "stream_only" => Ok(ExpandMode::StreamOnly),
            "fine-tune" | "fine_tune" => Ok(ExpandMode::FineTune),
            "scratch" | "from-scratch" | "from_scratch" => Ok(ExpandMode::FromScratch),
            _ => Err(Error::Config(format!("unknown expansion mode {s:?} (stream-only, fine-tune, scratch)"))),
        }
    }

    /// Epochs granted relative to a base run of `base` epochs.
    pub fn epochs(self, base: usize) -> usize {
        match self {
            ExpandMode::StreamOnly => (base / 4).max(1),
            ExpandMode::FineTune => (base * 15).div_ceil(100).max(1),
            ExpandMode::FromScratch => base,
        }
    }
}

/// The grown model, its parameters with trainability set for `mode`, and the
/// names of the parameters that were carried over.
pub struct Expansion {
    pub model: OmgFuser,
    pub store: ParamStore<f32>,
    pub copied: Vec<String>,
    pub mode: ExpandMode,
}

/// Appends `spec` as the last signal stream. Shared parameters are copied by
/// name unless `mode` is [`ExpandMode::FromScratch`].
pub fn expand_stream(old: &ModelConfig, old_store: &ParamStore<f32>, spec: StreamSpec, mode: ExpandMode, seed: u64) -> Result<Expansion> {
    if spec.name == RGB_STREAM || old.streams.iter().any(|s| s.name == spec.name) {
        return Err(Error::Config(format!("stream name {:?} already exists", spec.name)));
    }
    let mut cfg = old.clone();
    let name = spec.name.clone();
    cfg.streams.push(spec);
    let (model, mut store) = OmgFuser::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut copied = Vec::new();
    if mode != ExpandMode::FromScratch {
        for id in old_store.ids() {
            let pname = old_store.name(id);
            let value = old_store.get(id);
            match store.id(pname) {
                Some(nid) if store.get(nid).shape() == value.shape() => {
                    *store.get_mut(nid) = value.clone();
                    copied.push(pname.to_string());
                }
                Some(nid) => {
                    return Err(Error::Config(format!(
                        "parameter {pname} changes shape from {:?} to {:?}; dimension or patch size differ",
                        value.shape(),
                        store.get(nid).shape()
                    )))
                }
                None => return Err(Error::Config(format!("parameter {pname} has no counterpart in the expanded model"))),
            }
        }
    }
    if mode == ExpandMode::StreamOnly {
        store.freeze_all();
        for id in model.stream_param_ids(&store, &name) {
            store.set_trainable(id, true);
        }
    }
    Ok(Expansion { model, store, copied, mode })
}

/// Training settings for an expansion run derived from the base settings.
pub fn expansion_config(base: &TrainConfig, mode: ExpandMode) -> TrainConfig {
    let epochs = mode.epochs(base.epochs);
    let mut cfg = base.clone();
    cfg.epochs = epochs;
    cfg.warmup_epochs = base.warmup_epochs.min(epochs as f64 / 6.0);
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets() {
        assert_eq!(ExpandMode::FineTune.epochs(100), 15);
        assert_eq!(ExpandMode::FineTune.epochs(30), 5);
        assert_eq!(ExpandMode::StreamOnly.epochs(30), 7);
        assert_eq!(ExpandMode::FromScratch.epochs(30), 30);
        assert!(ExpandMode::StreamOnly.epochs(30) * 4 <= 30);
    }

    #[test]
    fn stream_only_freezes_old_parameters() {
        let cfg = ModelConfig::tiny(vec![StreamSpec::new("a", 1)]);
        let (_, old) = OmgFuser::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let e = expand_stream(&cfg, &old, StreamSpec::new("b", 1), ExpandMode::StreamOnly, 2).unwrap();
        assert_eq!(e.copied.len(), old.len());
        for id in e.store.ids() {
            let n = e.store.name(id);
            let new = n.starts_with("fss.b.") || n == "tfm.stream_embed.b";
            assert_eq!(e.store.is_trainable(id), new && e.store.kind(id) == crate::params::ParamKind::Weight, "{n}");
            if let Some(v) = old.by_name(n) {
                assert_eq!(v, e.store.get(id));
            }
        }
        assert!(expand_stream(&cfg, &old, StreamSpec::new("a", 1), ExpandMode::StreamOnly, 2).is_err());
        assert!(expand_stream(&cfg, &old, StreamSpec::new("rgb", 3), ExpandMode::FineTune, 2).is_err());
    }
}
