//! Scores the AVG-Fusion, single-signal and oracle baselines on a generated
//! set and prints the report as CSV.
//!
//! cargo run --release --example baselines -- [count]

use omg_fuser::data::{gen_samples, GenConfig, SampleRecord, SignalProfile};
use omg_fuser::eval::{evaluate, AvgFusion, OraclePredictor, Predictor, SingleSignal};

fn main() -> omg_fuser::Result<()> {
    let count: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let recs = gen_samples(&GenConfig::new(64, 64, SignalProfile::parse_list("a:0.75,b:0.65,c:0.55")?, 2), count)?;
    let refs: Vec<&SampleRecord> = recs.iter().collect();
    let methods: Vec<Box<dyn Predictor>> = vec![
        Box::new(AvgFusion { signals: vec!["a".into(), "b".into(), "c".into()] }),
        Box::new(SingleSignal("a".into())),
        Box::new(SingleSignal("b".into())),
        Box::new(SingleSignal("c".into())),
        Box::new(OraclePredictor),
    ];
    println!("method,pixel_f1,pixel_f1_best,pixel_auc,image_f1,image_auc");
    for m in &methods {
        let r = evaluate(m.as_ref(), &[("synthetic".into(), refs.clone())])?;
        let o = &r.overall;
        let opt = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.4}"));
        println!("{},{:.4},{:.4},{},{:.4},{}", r.method, o.pixel_f1, o.pixel_f1_best_threshold, opt(o.pixel_auc), o.image_f1, opt(o.image_auc));
    }
    Ok(())
}
