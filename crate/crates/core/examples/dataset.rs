//! Writes a synthetic dataset to disk and reads it back.
//!
//! cargo run --example dataset -- [out_dir] [count]

use std::path::PathBuf;

use omg_fuser::data::io::{gen_dataset, load_dataset};
use omg_fuser::data::{GenConfig, SignalProfile};

fn main() -> omg_fuser::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("omg_dataset"));
    let count: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let cfg = GenConfig::new(64, 64, SignalProfile::parse_list("a:0.75,b:0.65,c:0.55")?, 1);
    let m = gen_dataset(&cfg, count, &out)?;
    println!("wrote {} samples with signals {:?} to {}", m.count, m.signals, out.display());
    let (_, recs) = load_dataset(&out)?;
    for r in recs.iter().take(5) {
        let frac = r.loc.iter().filter(|&&b| b).count() as f64 / r.loc.len() as f64;
        println!("  {}: {:?}, {} objects, tampered {:.1}%", r.id, r.kind, r.seg.len(), 100.0 * frac);
    }
    Ok(())
}
