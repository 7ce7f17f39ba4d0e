//! Trains a two-signal model, adds a third signal in each expansion mode and
//! compares held-out F1.
//!
//! cargo run --release --example expansion -- [samples] [base_epochs]

use omg_fuser::data::{gen_samples, GenConfig, SampleRecord, SignalProfile};
use omg_fuser::eval::{mean_pixel_f1, ModelPredictor};
use omg_fuser::train::{expand_stream, expansion_config, train_run, ExpandMode, TrainConfig};
use omg_fuser::{ModelConfig, OmgFuser, StreamSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> omg_fuser::Result<()> {
    let samples: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let profiles = SignalProfile::parse_list("a:0.75,b:0.65,c:0.55")?;
    let train = gen_samples(&GenConfig::new(64, 64, profiles.clone(), 1), samples)?;
    let test = gen_samples(&GenConfig::new(64, 64, profiles, 2), 100)?;
    let test: Vec<&SampleRecord> = test.iter().collect();
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<String>>();
    let pick = |n: &[String]| train.iter().map(|r| r.select_signals(n)).collect::<omg_fuser::Result<Vec<_>>>();

    let base_cfg = TrainConfig::desk(epochs, 1);
    let two = ModelConfig::desk(vec![StreamSpec::new("b", 1), StreamSpec::new("c", 1)]);
    let (model, store) = OmgFuser::new(two, &mut ChaCha8Rng::seed_from_u64(1))?;
    let t = train_run(&model, store, &pick(&names(&["b", "c"]))?, base_cfg.clone(), None)?;
    let base_store = t.best().clone();
    println!("b,c: {:.4}", mean_pixel_f1(&ModelPredictor { model: &model, store: &base_store, batch_size: 16 }, &test)?);

    let all = pick(&names(&["b", "c", "a"]))?;
    for mode in [ExpandMode::StreamOnly, ExpandMode::FineTune, ExpandMode::FromScratch] {
        let e = expand_stream(&model.config, &base_store, StreamSpec::new("a", 1), mode, 1)?;
        let cfg = expansion_config(&base_cfg, mode);
        let epochs = cfg.epochs;
        let t = train_run(&e.model, e.store, &all, cfg, None)?;
        let f = mean_pixel_f1(&ModelPredictor { model: &e.model, store: t.best(), batch_size: 16 }, &test)?;
        println!("+a {mode:?}: {f:.4} after {epochs} epochs ({} tensors carried over)", e.copied.len());
    }
    Ok(())
}
