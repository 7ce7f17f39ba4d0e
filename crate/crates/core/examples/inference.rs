//! Trains briefly, saves a checkpoint, reloads it and writes a prediction
//! overlay for one held-out sample.
//!
//! cargo run --release --example inference -- [out_dir]

use std::path::PathBuf;

use omg_fuser::checkpoint::Checkpoint;
use omg_fuser::data::io::rgb_png;
use omg_fuser::data::{gen_samples, GenConfig, SampleRecord, SignalProfile};
use omg_fuser::eval::{ModelPredictor, Predictor};
use omg_fuser::render::overlay_strip;
use omg_fuser::train::{train_run, TrainConfig};
use omg_fuser::{ModelConfig, OmgFuser, StreamSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> omg_fuser::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("omg_infer"));
    let profiles = SignalProfile::parse_list("a:0.75,b:0.6")?;
    let train = gen_samples(&GenConfig::new(32, 32, profiles.clone(), 1), 120)?;
    let mut cfg = ModelConfig::tiny(vec![StreamSpec::new("a", 1), StreamSpec::new("b", 1)]);
    cfg.height = 32;
    cfg.width = 32;
    let (model, store) = OmgFuser::new(cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    let t = train_run(&model, store, &train, TrainConfig::desk(6, 1), Some(&out))?;
    drop(t);

    let ck = Checkpoint::load(&out.join("best.omgf"))?;
    let (model, store) = ck.instantiate(None)?;
    println!("loaded epoch {} (val F1 {:?})", ck.meta.state.epoch, ck.meta.state.best_val_f1);
    let test = gen_samples(&GenConfig::new(32, 32, profiles, 2), 8)?;
    let rec: &SampleRecord = test.iter().find(|r| r.det).unwrap_or(&test[0]);
    let p = ModelPredictor { model: &model, store: &store, batch_size: 1 };
    let pred = p.predict(&[rec])?.remove(0);
    println!("{}: detection score {:.3}, label {}", rec.id, pred.det, rec.det);
    let strip = overlay_strip(rec, &pred.loc, true)?;
    rgb_png(&strip.data, strip.height, strip.width, &out.join("overlay.png"))?;
    println!("wrote {}", out.join("overlay.png").display());
    Ok(())
}
