//! Trains the desk preset on an in-memory synthetic set and compares the
//! fused model with its inputs on held-out samples.
//!
//! cargo run --release --example train_desk -- [samples] [epochs] [lr_max] [p_drop]

use std::time::Instant;

use omg_fuser::data::{gen_samples, GenConfig, SampleRecord, SignalProfile};
use omg_fuser::eval::{mean_pixel_f1, AvgFusion, ModelPredictor, SingleSignal};
use omg_fuser::train::{split, TrainConfig, Trainer};
use omg_fuser::{ModelConfig, OmgFuser, StreamSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> omg_fuser::Result<()> {
    let samples: usize = arg(1, 2000);
    let epochs: usize = arg(2, 30);
    let lr: f64 = arg(3, 0.2);
    let p_drop: f64 = arg(4, 0.2);
    let profiles = SignalProfile::parse_list("a:0.75,b:0.65,c:0.55")?;
    let names: Vec<String> = profiles.iter().map(|p| p.name.clone()).collect();
    let t0 = Instant::now();
    let train = gen_samples(&GenConfig::new(64, 64, profiles.clone(), 1), samples)?;
    let test = gen_samples(&GenConfig::new(64, 64, profiles, 2), 200)?;
    println!("data: {:.1}s", t0.elapsed().as_secs_f64());

    let mut cfg = ModelConfig::desk(names.iter().map(|n| StreamSpec::new(n.clone(), 1)).collect());
    cfg.p_drop = p_drop;
    let (model, store) = OmgFuser::new(cfg, &mut ChaCha8Rng::seed_from_u64(7))?;
    let mut tc = TrainConfig::desk(epochs, 7);
    tc.lr_max = lr;
    let t1 = Instant::now();
    let mut trainer = Trainer::new(&model, store, tc)?;
    trainer.quiet = false;
    let (tr, va) = split(train.len(), 0.1, 7);
    let tr: Vec<&SampleRecord> = tr.iter().map(|&i| &train[i]).collect();
    let va: Vec<&SampleRecord> = va.iter().map(|&i| &train[i]).collect();
    trainer.run(&tr, &va, None)?;
    println!("train: {:.1}s", t1.elapsed().as_secs_f64());

    let test: Vec<&SampleRecord> = test.iter().collect();
    let fused = mean_pixel_f1(&ModelPredictor { model: &model, store: trainer.best(), batch_size: 16 }, &test)?;
    let last = mean_pixel_f1(&ModelPredictor { model: &model, store: &trainer.store, batch_size: 16 }, &test)?;
    let avg = mean_pixel_f1(&AvgFusion { signals: names.clone() }, &test)?;
    println!("held-out pixel-F1: fused(best) {fused:.4}  fused(last) {last:.4}  avg {avg:.4}");
    for n in &names {
        println!("  signal {n}: {:.4}", mean_pixel_f1(&SingleSignal(n.clone()), &test)?);
    }
    Ok(())
}
