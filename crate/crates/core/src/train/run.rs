//! The epoch loop: shuffling, augmentation, stream drop, optimization,
//! validation, logging and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{total_loss, LossWeights, LrSchedule, Sgd};
use crate::checkpoint::{Checkpoint, Meta, TrainState};
use crate::data::augment::{augment, AugmentConfig};
use crate::data::{collate, derived_rng, SampleRecord};
use crate::error::{io_err, Error, Result};
use crate::eval::{score_records, ModelPredictor};
use crate::model::OmgFuser;
use crate::params::{Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub val_fraction: f64,
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Settings used for the desk preset.
    pub fn desk(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr_max: 0.2,
            lr_min: 1e-6,
            warmup_epochs: 5.0_f64.min(epochs as f64 / 6.0),
            momentum: 0.9,
            weights: LossWeights::default(),
            val_fraction: 0.1,
            augment: true,
            seed,
        }
    }

    /// Settings at the published scale: 100 epochs, batch 160, lr 1e-3.
    pub fn fidelity(seed: u64) -> Self {
        TrainConfig { epochs: 100, batch_size: 160, lr_max: 1e-3, warmup_epochs: 5.0, ..Self::desk(100, seed) }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "desk" | "tiny" => Ok(Self::desk(30, seed)),
            "fidelity" => Ok(Self::fidelity(seed)),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk, fidelity or tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("validation fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.warmup_epochs < 0.0 || self.warmup_epochs >= self.epochs as f64 {
            return Err(Error::Config(format!("warm-up of {} epochs does not fit {} epochs", self.warmup_epochs, self.epochs)));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!("learning rates {} / {} are not ordered", self.lr_min, self.lr_max)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { lr_max: self.lr_max, lr_min: self.lr_min, warmup_epochs: self.warmup_epochs, total_epochs: self.epochs as f64 }
    }
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_bbce: f64,
    pub loss_dice: f64,
    pub loss_det: f64,
    pub val_pixel_f1: Option<f64>,
    pub val_auc: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,loss_total,loss_bbce,loss_dice,loss_det,val_pixel_f1,val_auc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{:.6e},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.epoch,
            self.lr,
            self.loss_total,
            self.loss_bbce,
            self.loss_dice,
            self.loss_det,
            opt(self.val_pixel_f1),
            opt(self.val_auc)
        )
    }
}

/// Deterministic train/validation split: a seeded shuffle, then the first
/// `round(fraction * n)` indices (at least one when `n > 1`) validate.
pub fn split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, u64::MAX - 2));
    let mut v = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n > 1 {
        v = v.clamp(1, n - 1);
    }
    let train = idx.split_off(v);
    (train, idx)
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(RunFiles { dir })
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("log.csv")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.omgf")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.omgf")
    }
}

/// A model being trained, with its optimizer and progress.
pub struct Trainer<'m> {
    pub model: &'m OmgFuser,
    pub store: ParamStore<f32>,
    pub opt: Sgd,
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub log: Vec<EpochLog>,
    pub best_store: Option<ParamStore<f32>>,
    pub quiet: bool,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m OmgFuser, store: ParamStore<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Sgd::new(cfg.momentum, store.len());
        Ok(Trainer { model, store, opt, cfg, state: TrainState::default(), log: Vec::new(), best_store: None, quiet: true })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(model: &'m OmgFuser, ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let (_, store) = ck.instantiate(Some(&model.config))?;
        let mut t = Trainer::new(model, store, cfg)?;
        if let Some(o) = ck.optimizer() {
            t.opt = o;
        }
        t.state = ck.meta.state.clone();
        Ok(t)
    }

    fn meta(&self) -> Meta {
        let mut state = self.state.clone();
        state.train_config = serde_json::to_value(&self.cfg).ok();
        Meta { config: self.model.config.clone(), streams: self.model.config.stream_names(), seed: self.cfg.seed, state }
    }

    pub fn checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        Checkpoint::from_store(self.meta(), &self.store, with_optimizer.then_some(&self.opt))
    }

    /// One pass over `train`; returns mean loss components.
    pub fn train_epoch(&mut self, train: &[&SampleRecord]) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        let seed = self.cfg.seed;
        let streams: Vec<String> = self.model.config.streams.iter().map(|s| s.name.clone()).collect();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derived_rng(seed, 3 * epoch as u64));
        let mut aug_rng = derived_rng(seed, 3 * epoch as u64 + 1);
        let mut drop_rng = derived_rng(seed, 3 * epoch as u64 + 2);
        let aug_cfg = AugmentConfig::default();
        let schedule = self.cfg.schedule();
        let steps = order.len().div_ceil(self.cfg.batch_size);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        let mut lr = schedule.at(epoch as f64);
        for (step, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let recs: Vec<SampleRecord> = chunk
                .iter()
                .map(|&i| if self.cfg.augment { augment(&mut aug_rng, &aug_cfg, train[i]) } else { train[i].clone() })
                .collect();
            let refs: Vec<&SampleRecord> = recs.iter().collect();
            let (batch, targets) = collate(&refs, &streams, self.model.config.patch)?;
            lr = schedule.at(epoch as f64 + step as f64 / steps as f64);
            let (grads, updates, parts) = {
                let mut ctx = Ctx::new(&self.store, true);
                let pred = self.model.forward(&mut ctx, &batch, Some(&mut drop_rng))?;
                let parts = total_loss(&mut ctx, &pred, &targets, self.cfg.weights)?;
                if !parts.value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "epoch {} step {step}: loss {} (bbce {}, dice {}, det {}) at lr {lr:.3e}",
                        epoch + 1,
                        parts.value,
                        parts.bbce,
                        parts.dice,
                        parts.det
                    )));
                }
                ctx.g.backward(parts.total)?;
                (ctx.param_grads(), ctx.take_buffer_updates(), parts)
            };
            if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
                return Err(Error::Diverged(format!("epoch {} step {step}: non-finite gradient for {}", epoch + 1, self.store.name(*id))));
            }
            self.opt.step(&mut self.store, &grads, lr)?;
            for (id, v) in updates {
                *self.store.get_mut(id) = v;
            }
            let b = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([parts.value, parts.bbce, parts.dice, parts.det]) {
                *s += v * b;
            }
            seen += chunk.len();
        }
        let n = seen.max(1) as f64;
        Ok(EpochLog {
            epoch: epoch + 1,
            lr,
            loss_total: sums[0] / n,
            loss_bbce: sums[1] / n,
            loss_dice: sums[2] / n,
            loss_det: sums[3] / n,
            val_pixel_f1: None,
            val_auc: None,
        })
    }

    /// Mean pixel-F1 and mean per-image pixel AUC on `val`.
    pub fn validate(&self, val: &[&SampleRecord]) -> Result<(f64, Option<f64>)> {
        let p = ModelPredictor { model: self.model, store: &self.store, batch_size: 16 };
        let rows = score_records(&p, val)?;
        let f1 = rows.iter().map(|r| r.pixel_f1).sum::<f64>() / rows.len() as f64;
        let aucs: Vec<f64> = rows.iter().filter_map(|r| r.pixel_auc).collect();
        Ok((f1, (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)))
    }

    /// Trains until `cfg.epochs` epochs are complete, writing the log and
    /// checkpoints under `files` when given.
    pub fn run(&mut self, train: &[&SampleRecord], val: &[&SampleRecord], files: Option<&RunFiles>) -> Result<()> {
        self.run_until(self.cfg.epochs, train, val, files)
    }

    /// Like [`Trainer::run`] but stops once `epoch` epochs are complete; the
    /// schedule still spans `cfg.epochs`.
    pub fn run_until(&mut self, epoch: usize, train: &[&SampleRecord], val: &[&SampleRecord], files: Option<&RunFiles>) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Input("no training samples".into()));
        }
        if let Some(f) = files {
            if self.state.epoch == 0 || !f.log().is_file() {
                fs::write(f.log(), format!("{LOG_HEADER}\n")).map_err(io_err(f.log()))?;
            }
        }
        while self.state.epoch < epoch.min(self.cfg.epochs) {
            let mut row = self.train_epoch(train)?;
            if !val.is_empty() {
                let (f1, auc) = self.validate(val)?;
                row.val_pixel_f1 = Some(f1);
                row.val_auc = auc;
            }
            self.state.epoch += 1;
            let improved = match (row.val_pixel_f1, self.state.best_val_f1) {
                (Some(f), Some(b)) => f > b,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if improved {
                self.state.best_val_f1 = row.val_pixel_f1;
                self.state.best_epoch = Some(self.state.epoch);
                self.best_store = Some(self.store.clone());
            }
            if !self.quiet {
                eprintln!("{}", row.csv_row());
            }
            if let Some(f) = files {
                let mut fh = fs::OpenOptions::new().append(true).open(f.log()).map_err(io_err(f.log()))?;
                writeln!(fh, "{}", row.csv_row()).map_err(io_err(f.log()))?;
                if improved {
                    self.checkpoint(false).save(&f.best())?;
                }
                self.checkpoint(true).save(&f.last())?;
            }
            self.log.push(row);
        }
        Ok(())
    }

    /// Parameters of the best validation epoch, or the current ones.
    pub fn best(&self) -> &ParamStore<f32> {
        self.best_store.as_ref().unwrap_or(&self.store)
    }
}

/// Splits `records`, trains from the given initialization and returns the
/// trainer (holding the best-validation parameters).
pub fn train_run<'m>(
    model: &'m OmgFuser,
    store: ParamStore<f32>,
    records: &[SampleRecord],
    cfg: TrainConfig,
    out: Option<&Path>,
) -> Result<Trainer<'m>> {
    if records.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let (tr, va) = split(records.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<&SampleRecord> = tr.iter().map(|&i| &records[i]).collect();
    let val: Vec<&SampleRecord> = va.iter().map(|&i| &records[i]).collect();
    let files = out.map(RunFiles::new).transpose()?;
    let mut t = Trainer::new(model, store, cfg)?;
    t.run(&train, &val, files.as_ref())?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_ninety_ten_and_disjoint() {
        let (t, v) = split(2000, 0.1, 4);
        assert_eq!((t.len(), v.len()), (1800, 200));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
        assert_eq!(split(2000, 0.1, 4), (t, v));
        assert_eq!(split(3, 0.1, 0).1.len(), 1);
    }

    #[test]
    fn desk_settings_validate() {
        TrainConfig::desk(30, 0).validate().unwrap();
        TrainConfig::desk(3, 0).validate().unwrap();
        let mut c = TrainConfig::desk(3, 0);
        c.warmup_epochs = 3.0;
        assert!(c.validate().is_err());
    }
}
