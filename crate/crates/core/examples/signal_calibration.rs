//! Measures mean pixel-F1 of the signal corruption family across levels, on
//! forged desk-geometry samples. The output is the table behind
//! `SignalProfile::calibrated`.
//!
//! cargo run --release --example signal_calibration -- [samples]

use omg_fuser::data::signal::{level_for, CALIBRATION};
use omg_fuser::data::{gen_signal, GenConfig, NoiseModel, SignalProfile};
use omg_fuser::metrics::pixel_f1;

fn main() -> omg_fuser::Result<()> {
    let samples: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let mut cfg = GenConfig::new(64, 64, Vec::new(), 11);
    cfg.forged_ratio = 1.0;
    let recs = omg_fuser::data::gen_samples(&cfg, samples)?;
    let prevalence = recs.iter().map(|r| r.loc.iter().filter(|&&b| b).count() as f64 / r.loc.len() as f64).sum::<f64>() / samples as f64;
    println!("{samples} forged samples, mean tampered fraction {prevalence:.4}");
    let mut rng = omg_fuser::data::derived_rng(77, 0);
    let census = |model: &NoiseModel, rng: &mut rand_chacha::ChaCha8Rng| -> omg_fuser::Result<f64> {
        let mut total = 0.0;
        for r in &recs {
            let s = gen_signal(rng, &r.loc, r.height, r.width, model);
            total += pixel_f1(&s, &r.loc, 0.5)?;
        }
        Ok(total / recs.len() as f64)
    };
    println!("level  mean_f1  table");
    for &(level, table) in CALIBRATION.iter() {
        let f1 = census(&NoiseModel::at_level(level), &mut rng)?;
        println!("({level:.2}, {f1:.4}), // table {table:.4}");
    }
    println!("reliability  level  mean_f1");
    for rho in [0.0, 0.55, 0.65, 0.7, 0.75] {
        let p = SignalProfile::calibrated("s", rho)?;
        println!("{rho:.2}         {:.3}  {:.4}", level_for(rho), census(&p.model, &mut rng)?);
    }
    Ok(())
}
