//! The operations behind the command-line tool: dataset generation,
//! training, evaluation, inference, stream expansion and self-checks.
//!
//! Settings resolve in three layers: preset defaults, then the matching
//! section (`data`, `model`, `train`) of an optional JSON config file, then
//! explicit flags. The resolved settings are written to `config.json` in
//! every output directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::check::{run_checks, CheckOptions, CheckReport};
use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, StreamSpec};
use crate::data::io::{gen_dataset, gray_png, load_dataset, read_inputs, rgb_png, write_json, Manifest};
use crate::data::{GenConfig, SampleRecord, SignalProfile};
use crate::error::{io_err, Error, Result};
use crate::eval::{evaluate, AvgFusion, ModelPredictor, OraclePredictor, Output, Predictor, SingleSignal};
use crate::metrics::EvalReport;
use crate::model::OmgFuser;
use crate::params::ParamStore;
use crate::render::overlay_strip;
use crate::train::{expand_stream, expansion_config, split, ExpandMode, RunFiles, TrainConfig, Trainer};

pub const DEFAULT_PROFILES: &str = "a:0.75,b:0.65,c:0.55";
pub const CONFIG_FILE: &str = "config.json";

/// Options shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    /// `None` keeps the seed stored in a checkpoint, or 0.
    pub seed: Option<u64>,
    /// Numerics always run on one thread, so results are reproducible
    /// either way; the flag is recorded with the outputs.
    pub deterministic: bool,
    /// Parsed config file.
    pub config: Option<Value>,
}

impl Settings {
    pub fn load_config(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !v.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        for key in v.as_object().expect("object").keys() {
            if !["data", "model", "train"].contains(&key.as_str()) {
                return Err(Error::Config(format!("{}: unknown section {key:?} (data, model, train)", path.display())));
            }
        }
        self.config = Some(v);
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn section(&self, name: &str) -> Option<&Value> {
        self.config.as_ref().and_then(|c| c.get(name))
    }

    fn echo(&self, dir: &Path, command: &str, body: Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut v = json!({ "command": command, "seed": self.seed, "deterministic": self.deterministic });
        merge(&mut v, &body);
        write_json(&dir.join(CONFIG_FILE), &v)
    }
}

/// Recursively overlays `over` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: T, section: Option<&Value>, what: &str) -> Result<T> {
    let Some(over) = section else { return Ok(base) };
    let mut v = serde_json::to_value(&base)?;
    merge(&mut v, over);
    serde_json::from_value(v).map_err(|e| Error::Config(format!("config file section {what:?}: {e}")))
}

/// Parses `HxW`, e.g. `64x64`.
pub fn parse_geometry(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("geometry {s:?} is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (h, w) = (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?);
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

#[derive(Clone, Debug)]
pub struct GenDataArgs {
    pub count: usize,
    pub out: PathBuf,
    pub profiles: Option<String>,
    pub forged_ratio: Option<f64>,
    pub geometry: Option<(usize, usize)>,
    pub seg_noise: Option<usize>,
}

pub fn gen_data(s: &Settings, a: &GenDataArgs) -> Result<Manifest> {
    let profiles = SignalProfile::parse_list(DEFAULT_PROFILES)?;
    let mut cfg = overlay(GenConfig::new(64, 64, profiles, s.seed()), s.section("data"), "data")?;
    if let Some(p) = &a.profiles {
        cfg.profiles = SignalProfile::parse_list(p)?;
    }
    if let Some(r) = a.forged_ratio {
        cfg.forged_ratio = r;
    }
    if let Some((h, w)) = a.geometry {
        cfg.scene.height = h;
        cfg.scene.width = w;
    }
    if let Some(n) = a.seg_noise {
        cfg.seg_noise = n;
    }
    if let Some(seed) = s.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let m = gen_dataset(&cfg, a.count, &a.out)?;
    s.echo(&a.out, "gen-data", json!({ "count": a.count, "data": cfg }))?;
    Ok(m)
}

/// Records of a dataset restricted to `streams` (all signals when `None`),
/// and the stream specs they imply.
pub fn load_streams(data: &Path, streams: Option<&[String]>) -> Result<(Vec<SampleRecord>, Vec<StreamSpec>)> {
    let (manifest, recs) = load_dataset(data)?;
    let first = recs.first().ok_or_else(|| Error::Input(format!("{} contains no samples", data.display())))?;
    let names: Vec<String> = match (streams, &manifest) {
        (Some(s), _) => s.to_vec(),
        (None, Some(m)) => m.signals.clone(),
        (None, None) => first.signals.iter().map(|s| s.name.clone()).collect(),
    };
    let specs = names
        .iter()
        .map(|n| {
            first
                .signal(n)
                .map(|sig| StreamSpec::new(n.clone(), sig.channels))
                .ok_or_else(|| Error::Input(format!("{}: dataset has no signal {n:?}", data.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let recs = recs.iter().map(|r| r.select_signals(&names)).collect::<Result<Vec<_>>>()?;
    Ok((recs, specs))
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub preset: String,
    pub epochs: Option<usize>,
    pub p_drop: Option<f64>,
    pub resume: Option<PathBuf>,
    pub out: PathBuf,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    /// Signals to use as streams; all by default.
    pub streams: Option<Vec<String>>,
    pub quiet: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: usize,
    pub best_val_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub files: RunFiles,
}

fn apply_train_flags(mut t: TrainConfig, epochs: Option<usize>, lr: Option<f64>, batch: Option<usize>) -> TrainConfig {
    if let Some(e) = epochs {
        t.warmup_epochs = t.warmup_epochs.min(e as f64 / 6.0);
        t.epochs = e;
    }
    if let Some(lr) = lr {
        t.lr_max = lr;
    }
    if let Some(b) = batch {
        t.batch_size = b;
    }
    t
}

fn split_records<'r>(recs: &'r [SampleRecord], t: &TrainConfig) -> (Vec<&'r SampleRecord>, Vec<&'r SampleRecord>) {
    let (tr, va) = split(recs.len(), t.val_fraction, t.seed);
    (tr.iter().map(|&i| &recs[i]).collect(), va.iter().map(|&i| &recs[i]).collect())
}

pub fn train(s: &Settings, a: &TrainArgs) -> Result<TrainOutcome> {
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let streams = match (&a.streams, &resume) {
        (Some(v), _) => Some(v.clone()),
        (None, Some(ck)) => Some(ck.meta.config.streams.iter().map(|s| s.name.clone()).collect()),
        (None, None) => None,
    };
    let (recs, specs) = load_streams(&a.data, streams.as_deref())?;
    let (model_cfg, train_cfg) = match &resume {
        Some(ck) => {
            if a.p_drop.is_some_and(|p| p != ck.meta.config.p_drop) {
                return Err(Error::Config("--p-drop cannot change when resuming".into()));
            }
            let stored = match &ck.meta.state.train_config {
                Some(v) => serde_json::from_value(v.clone())?,
                None => TrainConfig::preset(&a.preset, ck.meta.seed)?,
            };
            let mut t = overlay(stored, s.section("train"), "train")?;
            t.seed = s.seed.unwrap_or(ck.meta.seed);
            (ck.meta.config.clone(), apply_train_flags(t, a.epochs, a.lr, a.batch_size))
        }
        None => {
            let mut m = ModelConfig::preset(&a.preset, specs)?;
            let first = &recs[0];
            m.height = first.height;
            m.width = first.width;
            let mut m = overlay(m, s.section("model"), "model")?;
            if let Some(p) = a.p_drop {
                m.p_drop = p;
            }
            let t = overlay(TrainConfig::preset(&a.preset, s.seed())?, s.section("train"), "train")?;
            let mut t = apply_train_flags(t, a.epochs, a.lr, a.batch_size);
            t.seed = s.seed();
            (m, t)
        }
    };
    model_cfg.validate()?;
    train_cfg.validate()?;
    let files = RunFiles::new(&a.out)?;
    s.echo(
        &a.out,
        "train",
        json!({ "data": a.data, "preset": a.preset, "resume": a.resume, "model": model_cfg, "train": train_cfg }),
    )?;
    let (model, store) = OmgFuser::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(train_cfg.seed))?;
    let mut trainer = match &resume {
        Some(ck) => Trainer::resume(&model, ck, train_cfg)?,
        None => Trainer::new(&model, store, train_cfg)?,
    };
    trainer.quiet = a.quiet;
    let (tr, va) = split_records(&recs, &trainer.cfg);
    trainer.run(&tr, &va, Some(&files))?;
    Ok(TrainOutcome { epochs: trainer.state.epoch, best_val_f1: trainer.state.best_val_f1, best_epoch: trainer.state.best_epoch, files })
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub data: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// `avg`, `signal:NAME` or `oracle`.
    pub baseline: Option<String>,
    pub out: Option<PathBuf>,
    pub batch_size: usize,
}

enum Method {
    Model(OmgFuser, ParamStore<f32>),
    Avg,
    Signal(String),
    Oracle,
}

fn method(a: &EvalArgs) -> Result<Method> {
    match (&a.checkpoint, a.baseline.as_deref()) {
        (Some(_), Some(_)) => Err(Error::Config("give either a checkpoint or a baseline, not both".into())),
        (None, None) => Err(Error::Config("need a checkpoint or a baseline".into())),
        (Some(p), None) => {
            let (m, s) = Checkpoint::load(p)?.instantiate(None)?;
            Ok(Method::Model(m, s))
        }
        (None, Some("avg")) => Ok(Method::Avg),
        (None, Some("oracle")) => Ok(Method::Oracle),
        (None, Some(b)) => match b.strip_prefix("signal:") {
            Some(n) if !n.is_empty() => Ok(Method::Signal(n.to_string())),
            _ => Err(Error::Config(format!("unknown baseline {b:?} (avg, signal:NAME, oracle)"))),
        },
    }
}

pub fn eval(s: &Settings, a: &EvalArgs) -> Result<EvalReport> {
    if a.data.is_empty() {
        return Err(Error::Config("no dataset given".into()));
    }
    let m = method(a)?;
    let streams = match &m {
        Method::Model(model, _) => Some(model.config.streams.iter().map(|s| s.name.clone()).collect::<Vec<_>>()),
        Method::Signal(n) => Some(vec![n.clone()]),
        _ => None,
    };
    let mut sets = Vec::new();
    for d in &a.data {
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| d.display().to_string());
        sets.push((name, load_streams(d, streams.as_deref())?));
    }
    let avg;
    let model_p;
    let single;
    let p: &dyn Predictor = match &m {
        Method::Model(model, store) => {
            model_p = ModelPredictor { model, store, batch_size: a.batch_size.max(1) };
            &model_p
        }
        Method::Avg => {
            avg = AvgFusion { signals: sets[0].1 .1.iter().map(|s| s.name.clone()).collect() };
            &avg
        }
        Method::Signal(n) => {
            single = SingleSignal(n.clone());
            &single
        }
        Method::Oracle => &OraclePredictor,
    };
    let refs: Vec<(String, Vec<&SampleRecord>)> = sets.iter().map(|(n, (recs, _))| (n.clone(), recs.iter().collect())).collect();
    let report = evaluate(p, &refs)?;
    if let Some(out) = &a.out {
        s.echo(out, "eval", json!({ "data": a.data, "checkpoint": a.checkpoint, "baseline": a.baseline, "method": report.method }))?;
        fs::write(out.join("report.json"), report.to_json()?).map_err(io_err(out.join("report.json")))?;
        fs::write(out.join("per_sample.csv"), report.to_csv()).map_err(io_err(out.join("per_sample.csv")))?;
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct InferArgs {
    pub checkpoint: PathBuf,
    /// A sample directory: `image.png`, `signals/`, optional `seg/` or
    /// `seg_labels.png`, optional `mask.png`.
    pub input: PathBuf,
    pub out: PathBuf,
    pub overlay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Inference {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Detection score in (0, 1).
    pub score: f64,
    pub forged: bool,
    pub tampered_fraction: f64,
}

pub fn infer(s: &Settings, a: &InferArgs) -> Result<Inference> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (model, store) = ck.instantiate(None)?;
    let names: Vec<String> = model.config.streams.iter().map(|s| s.name.clone()).collect();
    let rec = read_inputs(&a.input, &names)?;
    if (rec.height, rec.width) != (model.config.height, model.config.width) {
        return Err(Error::Input(format!(
            "{}: image is {}x{}, model expects {}x{}",
            a.input.display(),
            rec.height,
            rec.width,
            model.config.height,
            model.config.width
        )));
    }
    let p = ModelPredictor { model: &model, store: &store, batch_size: 1 };
    let Output { loc, det } = p.predict(&[&rec])?.remove(0);
    s.echo(&a.out, "infer", json!({ "checkpoint": a.checkpoint, "input": a.input, "overlay": a.overlay }))?;
    let (h, w) = (rec.height, rec.width);
    let binary: Vec<f32> = loc.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    gray_png(&binary, h, w, &a.out.join("mask.png"))?;
    gray_png(&loc, h, w, &a.out.join("probability.png"))?;
    if a.overlay {
        let labeled = a.input.join("mask.png").is_file();
        let c = overlay_strip(&rec, &loc, labeled)?;
        rgb_png(&c.data, c.height, c.width, &a.out.join("overlay.png"))?;
    }
    let res = Inference {
        id: rec.id.clone(),
        height: h,
        width: w,
        score: det as f64,
        forged: det >= 0.5,
        tampered_fraction: binary.iter().sum::<f32>() as f64 / binary.len() as f64,
    };
    write_json(&a.out.join("score.json"), &res)?;
    Ok(res)
}

#[derive(Clone, Debug)]
pub struct ExpandArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Name of the signal to add; it must exist in the dataset.
    pub stream: String,
    pub mode: ExpandMode,
    /// Epochs of the original run; read from the checkpoint when absent.
    pub base_epochs: Option<usize>,
    pub out: PathBuf,
    pub quiet: bool,
}

#[derive(Clone, Debug)]
pub struct ExpandOutcome {
    pub epochs: usize,
    pub base_epochs: usize,
    pub copied: usize,
    pub best_val_f1: Option<f64>,
    pub files: RunFiles,
}

pub fn expand(s: &Settings, a: &ExpandArgs) -> Result<ExpandOutcome> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (old_model, old_store) = ck.instantiate(None)?;
    let mut names: Vec<String> = old_model.config.streams.iter().map(|s| s.name.clone()).collect();
    names.push(a.stream.clone());
    let (recs, specs) = load_streams(&a.data, Some(&names))?;
    let spec = specs.last().expect("at least the new stream").clone();
    let seed = s.seed.unwrap_or(ck.meta.seed);
    let exp = expand_stream(&old_model.config, &old_store, spec, a.mode, seed)?;
    let stored: TrainConfig = match &ck.meta.state.train_config {
        Some(v) => serde_json::from_value(v.clone())?,
        None => TrainConfig::desk(30, seed),
    };
    let mut base = overlay(stored, s.section("train"), "train")?;
    if let Some(e) = a.base_epochs {
        base.epochs = e;
    }
    base.seed = seed;
    let base_epochs = base.epochs;
    let tcfg = expansion_config(&base, a.mode);
    let files = RunFiles::new(&a.out)?;
    s.echo(
        &a.out,
        "expand",
        json!({ "checkpoint": a.checkpoint, "data": a.data, "stream": a.stream, "mode": a.mode, "base_epochs": base_epochs, "model": exp.model.config, "train": tcfg }),
    )?;
    let copied = exp.copied.clone();
    let mut trainer = Trainer::new(&exp.model, exp.store, tcfg)?;
    trainer.quiet = a.quiet;
    let (tr, va) = split_records(&recs, &trainer.cfg);
    trainer.run(&tr, &va, Some(&files))?;
    if a.mode == ExpandMode::StreamOnly {
        for name in &copied {
            let old = old_store.by_name(name).expect("copied from the old store");
            for store in [&trainer.store, trainer.best()] {
                if store.by_name(name).map(|t| t.data().iter().map(|v| v.to_bits()).eq(old.data().iter().map(|v| v.to_bits()))) != Some(true) {
                    return Err(Error::Invariant(format!("frozen parameter {name} changed during stream-only expansion")));
                }
            }
        }
    }
    Ok(ExpandOutcome { epochs: trainer.state.epoch, base_epochs, copied: copied.len(), best_val_f1: trainer.state.best_val_f1, files })
}

pub fn check(s: &Settings, quick: bool, fault: Option<&str>) -> Result<CheckReport> {
    let fault = fault
        .map(|f| match omg_tensor::OpKind::from_name(f) {
            Some(omg_tensor::OpKind::Leaf) | None => Err(Error::Config(format!("cannot inject a fault into {f:?}"))),
            Some(k) => Ok(k),
        })
        .transpose()?;
    run_checks(&CheckOptions { quick, fault, seed: s.seed(), ..Default::default() })
}
