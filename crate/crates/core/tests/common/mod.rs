//! Acceptance checks with their reference computations. Each returns an
//! [`Outcome`]; `acceptance.rs` prints them and the other test files assert
//! on them.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use omg_fuser::check::{run_checks, CheckOptions, GRAD_TOLERANCE};
use omg_fuser::checkpoint::Checkpoint;
use omg_fuser::config::{ModelConfig, StreamSpec};
use omg_fuser::data::{gen_samples, GenConfig, SampleRecord, SignalProfile};
use omg_fuser::eval::{mean_pixel_f1, AvgFusion, ModelPredictor, SingleSignal};
use omg_fuser::fusion::{stack_streams, stream_drop, Mode};
use omg_fuser::metrics::{auc, best_threshold_f1, pixel_f1};
use omg_fuser::model::OmgFuser;
use omg_fuser::objects::{oga_mask_for, OgaMask, SegmentationMapSet};
use omg_fuser::ogt::{oga_attention, MaskBatch, ObjectGuidedTransformer};
use omg_fuser::params::{Ctx, ParamBuilder, ParamStore};
use omg_fuser::train::{expand_stream, expansion_config, total_loss, ExpandMode, LossWeights, Targets, TrainConfig};
use omg_tensor::{Tensor, BLOCKED};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

// ---- 1. mask construction -------------------------------------------------

/// Random instance maps on a grid of at most 8x8 patches with at most five
/// objects, built from rectangles and scattered pixels so that overlaps and
/// uncovered pixels both occur.
pub fn random_segmentation(rng: &mut ChaCha8Rng) -> (SegmentationMapSet, usize) {
    let p = [1, 2, 4, 8][rng.gen_range(0..4)];
    let (gh, gw) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
    let (h, w) = (gh * p, gw * p);
    let k = rng.gen_range(0..=5);
    let mut maps = Vec::new();
    for _ in 0..k {
        let m: Vec<bool> = if rng.gen_bool(0.25) {
            let q = rng.gen_range(0.01..0.2);
            (0..h * w).map(|_| rng.gen_bool(q)).collect()
        } else {
            let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let (y1, x1) = (rng.gen_range(y0 + 1..=h), rng.gen_range(x0 + 1..=w));
            (0..h * w).map(|i| (y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))).collect()
        };
        maps.push(m);
    }
    (SegmentationMapSet::new(h, w, maps).unwrap(), p)
}

/// Object ids per patch, with uncovered pixels mapped to an extra id.
fn reference_sets(seg: &SegmentationMapSet, p: usize) -> Vec<BTreeSet<usize>> {
    let (gh, gw) = (seg.height / p, seg.width / p);
    let k = seg.maps.len();
    let mut sets = vec![BTreeSet::new(); gh * gw];
    for y in 0..seg.height {
        for x in 0..seg.width {
            let i = y * seg.width + x;
            let ids: Vec<usize> = (0..k).filter(|&j| seg.maps[j][i]).collect();
            let s = &mut sets[(y / p) * gw + x / p];
            if ids.is_empty() {
                s.insert(k);
            }
            s.extend(ids);
        }
    }
    sets
}

pub fn mask_oracle(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let mut bad = 0;
    let mut first = None;
    for case in 0..cases {
        let (seg, p) = random_segmentation(&mut rng);
        let sets = reference_sets(&seg, p);
        let l = sets.len();
        let mask = oga_mask_for(&seg, p).unwrap();
        let mismatch = (0..l * l).find(|&i| {
            let (u, v) = (i / l, i % l);
            let want = if sets[u].is_disjoint(&sets[v]) { BLOCKED } else { 0.0 };
            mask.entry(u, v) != want
        });
        if let Some(i) = mismatch {
            bad += 1;
            first.get_or_insert(format!("case {case} pair {:?}", (i / l, i % l)));
        }
    }
    let t = start.elapsed();
    Outcome::new(bad == 0 && t < Duration::from_secs(5), format!("{cases} configs, {bad} mismatches{}, {}", first.map(|f| format!(" (first: {f})")).unwrap_or_default(), secs(t)))
}

// ---- 2. OGA with nothing blocked -----------------------------------------

/// Multi-head attention written out with loops.
fn reference_attention(x: &[f64], rows: usize, d: usize, heads: usize, w: [(&[f64], &[f64]); 4]) -> Vec<f64> {
    let lin = |x: &[f64], (wt, b): (&[f64], &[f64])| -> Vec<f64> {
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            for o in 0..d {
                out[r * d + o] = b[o] + (0..d).map(|i| x[r * d + i] * wt[i * d + o]).sum::<f64>();
            }
        }
        out
    };
    let (q, k, v) = (lin(x, w[0]), lin(x, w[1]), lin(x, w[2]));
    let dh = d / heads;
    let mut att = vec![0.0; rows * d];
    for h in 0..heads {
        for i in 0..rows {
            let logits: Vec<f64> = (0..rows).map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                att[i * d + h * dh + c] = (0..rows).map(|j| e[j] / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    lin(&att, w[3])
}

pub fn oga_reduction(instances: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d = heads * rng.gen_range(1..=4);
        let len = rng.gen_range(1..=12);
        let mut b = ParamBuilder::new(&mut rng);
        let ogt = ObjectGuidedTransformer::new(&mut b, "ogt", 1, d, heads, 2, 1e-5).unwrap();
        let store: ParamStore<f64> = b.store.cast();
        let blk = &ogt.blocks.0[0];
        let x: Vec<f64> = (0..len * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let full = OgaMask::full(len);
        let masks = MaskBatch::<f64>::new(&[&full]).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let z = ctx.g.constant(Tensor::new(vec![len, d], x.clone()).unwrap());
        let got = oga_attention(&mut ctx, z, &masks, blk).unwrap();
        let got = ctx.g.value(got).data().to_vec();
        let p = |l: &omg_fuser::layers::Linear| (store.get(l.weight).data(), store.get(l.bias).data());
        let want = reference_attention(&x, len, d, heads, [p(&blk.q), p(&blk.k), p(&blk.v), p(&blk.proj)]);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    Outcome::new(worst < 1e-6, format!("{instances} instances, max |diff| {worst:.2e}"))
}

// ---- 3. group isolation ----------------------------------------------------

pub fn group_isolation(trials: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..trials {
        let p = 4;
        let (gh, gw) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
        let (h, w) = (gh * p, gw * p);
        // objects are unions of whole patches, so the mask is block diagonal
        let groups = rng.gen_range(2..=4);
        let label: Vec<usize> = (0..gh * gw).map(|_| rng.gen_range(0..groups)).collect();
        let maps: Vec<Vec<bool>> = (0..groups).map(|g| (0..h * w).map(|i| label[(i / w / p) * gw + (i % w) / p] == g).collect()).collect();
        let mask = oga_mask_for(&SegmentationMapSet::new(h, w, maps).unwrap(), p).unwrap();
        let l = gh * gw;
        let target = label[rng.gen_range(0..l)];
        let mut b = ParamBuilder::new(&mut rng);
        let ogt = ObjectGuidedTransformer::new(&mut b, "ogt", 2, 8, 2, 2, 1e-5).unwrap();
        let store = b.store;
        let x: Vec<f32> = (0..l * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = x.clone();
        for t in 0..l {
            if label[t] != target {
                for v in &mut y[t * 8..(t + 1) * 8] {
                    *v += rng.gen_range(-3.0..3.0);
                }
            }
        }
        let run = |input: Vec<f32>| {
            let masks = MaskBatch::<f32>::new(&[&mask]).unwrap();
            let mut ctx = Ctx::new(&store, false);
            let z = ctx.g.constant(Tensor::new(vec![l, 8], input).unwrap());
            let out = ogt.forward(&mut ctx, z, &masks).unwrap();
            ctx.g.value(out).data().to_vec()
        };
        let (a, c) = (run(x), run(y));
        let same = (0..l).filter(|&t| label[t] == target).all(|t| a[t * 8..(t + 1) * 8].iter().zip(&c[t * 8..(t + 1) * 8]).all(|(u, v)| u.to_bits() == v.to_bits()));
        if !same {
            failures += 1;
        }
    }
    Outcome::new(failures == 0, format!("{trials} trials, {failures} with a changed in-group output"))
}

// ---- 4. end-to-end gradient ------------------------------------------------

pub fn model_gradient() -> Outcome {
    let start = Instant::now();
    let rep = run_checks(&CheckOptions { mask_cases: 0, ..Default::default() }).unwrap();
    let t = start.elapsed();
    let m = rep.probes.iter().find(|p| p.name == "model_end_to_end").unwrap();
    Outcome::new(
        m.max_rel_error < GRAD_TOLERANCE && rep.passed() && t < Duration::from_secs(600),
        format!("max rel error {:.2e} over {} coordinates ({} op probes also pass), {}", m.max_rel_error, m.checked, rep.probes.len() - 1, secs(t)),
    )
}

// ---- 5. stream drop --------------------------------------------------------

pub fn stream_drop_stats(draws: usize, seed: u64) -> Outcome {
    let streams = 4;
    let store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&store, true);
    let names: Vec<String> = (0..streams).map(|i| format!("s{i}")).collect();
    let toks: Vec<_> = (0..streams).map(|_| ctx.g.constant(Tensor::full(vec![draws, 1], 1.0))).collect();
    let stack = stack_streams(&ctx, &names, &toks).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = stream_drop(&mut ctx, &stack, draws, 0.3, Mode::Train, false, &mut rng).unwrap();
    let vals: Vec<Vec<f64>> = out.tokens.iter().map(|&t| ctx.g.value(t).data().to_vec()).collect();
    let means: Vec<f64> = vals.iter().map(|v| v.iter().sum::<f64>() / draws as f64).collect();
    let dropped = vals.iter().flatten().filter(|&&v| v == 0.0).count() as f64 / (draws * streams) as f64;
    let all_dropped = (0..draws).filter(|&b| vals.iter().all(|v| v[b] == 0.0)).count();
    let worst = means.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    Outcome::new(
        worst <= 0.02 && (dropped - 0.3).abs() <= 0.02 && all_dropped == 0,
        format!("per-stream means {:?}, drop rate {dropped:.4}, all-dropped stacks {all_dropped}", means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>()),
    )
}

// ---- 6. losses ---------------------------------------------------------------

fn ref_bce(p: f64, t: f64) -> f64 {
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

pub fn loss_checks(seed: u64) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let n = 1000;
    for ratio in [0.01, 0.1, 0.5] {
        let pos = (ratio * n as f64).round() as usize;
        let t: Vec<f64> = (0..n).map(|i| if i < pos { 1.0 } else { 0.0 }).collect();
        let mut g = omg_tensor::Graph::<f64>::new();
        let p = g.constant(Tensor::full(vec![1, n], 0.5));
        let l = g.balanced_bce(p, &t, 1).unwrap();
        let v = g.value(l).data()[0];
        ok &= (v - std::f64::consts::LN_2).abs() <= 1e-6;
        notes.push(format!("bBCE@{ratio}={v:.9}"));
    }
    for pos in [1usize, 10, 100] {
        let t: Vec<f64> = (0..400).map(|i| if i < pos { 1.0 } else { 0.0 }).collect();
        let mut g = omg_tensor::Graph::<f64>::new();
        let p = g.constant(Tensor::new(vec![1, 400], t.clone()).unwrap());
        let d = g.dice_loss(p, &t, 1).unwrap();
        let v = g.value(d).data()[0];
        ok &= v <= 1.0 / (2.0 * pos as f64 + 1.0);
        notes.push(format!("dice(n={pos})={v:.2e}"));
    }
    // weighted recomposition against hand-written components
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, hw) = (3, 64);
    let loc: Vec<f64> = (0..b * hw).map(|_| rng.gen_range(0.02..0.98)).collect();
    let det: Vec<f64> = (0..b).map(|_| rng.gen_range(0.02..0.98)).collect();
    let tl: Vec<f64> = (0..b * hw).map(|i| if i % hw < 5 + 7 * (i / hw) && i / hw != 1 { 1.0 } else { 0.0 }).collect();
    let td: Vec<f64> = vec![1.0, 0.0, 1.0];
    let mut want_bbce = 0.0;
    let mut want_dice = 0.0;
    for s in 0..b {
        let (p, t) = (&loc[s * hw..(s + 1) * hw], &tl[s * hw..(s + 1) * hw]);
        let class_mean = |c: f64| {
            let v: Vec<f64> = p.iter().zip(t).filter(|(_, &y)| y == c).map(|(&x, &y)| ref_bce(x, y)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        want_bbce += match (class_mean(0.0), class_mean(1.0)) {
            (Some(a), Some(c)) => (a + c) / 2.0,
            (Some(a), None) | (None, Some(a)) => a,
            _ => unreachable!(),
        };
        let inter: f64 = p.iter().zip(t).map(|(x, y)| x * y).sum();
        want_dice += 1.0 - (2.0 * inter + 1.0) / (p.iter().sum::<f64>() + t.iter().sum::<f64>() + 1.0);
    }
    want_bbce /= b as f64;
    want_dice /= b as f64;
    let want_det = det.iter().zip(&td).map(|(&p, &t)| ref_bce(p, t)).sum::<f64>() / b as f64;
    let want = 0.3 * want_bbce + 0.45 * want_dice + 0.25 * want_det;
    let store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&store, true);
    let lv = ctx.g.constant(Tensor::new(vec![b, hw], loc).unwrap());
    let dv = ctx.g.constant(Tensor::new(vec![b], det).unwrap());
    let pred = omg_fuser::model::Predictions { loc: lv, det: dv, stream_tokens: vec![], fused: lv, forensic: lv };
    let parts = total_loss(&mut ctx, &pred, &Targets { samples: b, loc: tl, det: td }, LossWeights { a: 0.3, b: 0.45, c: 0.25 }).unwrap();
    let err = (parts.value - want).abs();
    ok &= err <= 1e-7;
    notes.push(format!("recomposition |diff| {err:.1e}"));
    Outcome::new(ok, notes.join(", "))
}

// ---- 7. metrics --------------------------------------------------------------

fn count_f1(pred: &[f32], gt: &[bool], thr: f32) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= thr, g) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0.0 {
        1.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

fn pairwise_auc(s: &[f64], y: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn metric_oracles(instances: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut f1_bad, mut auc_worst, mut best_bad, mut best_ref_bad) = (0, 0.0f64, 0, 0);
    for i in 0..instances {
        let n = rng.gen_range(1..200);
        let q = [0.0, 0.05, 0.3, 0.7, 1.0][i % 5];
        let gt: Vec<bool> = (0..n).map(|_| rng.gen_bool(q)).collect();
        // coarse levels force ties
        let levels = [3, 11, 1000][i % 3];
        let pred: Vec<f32> = (0..n).map(|_| rng.gen_range(0..=levels) as f32 / levels as f32).collect();
        if pixel_f1(&pred, &gt, 0.5).unwrap() != count_f1(&pred, &gt, 0.5) {
            f1_bad += 1;
        }
        let s: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
        match (auc(&s, &gt).unwrap(), pairwise_auc(&s, &gt)) {
            (Some(a), Some(b)) => auc_worst = auc_worst.max((a - b).abs()),
            (None, None) => {}
            _ => auc_worst = f64::INFINITY,
        }
        let best = best_threshold_f1(&pred, &gt).unwrap();
        if best < count_f1(&pred, &gt, 0.5) {
            best_bad += 1;
        }
        let mut thresholds: Vec<f32> = pred.clone();
        thresholds.push(f32::INFINITY);
        let brute = thresholds.iter().map(|&t| count_f1(&pred, &gt, t)).fold(0.0, f64::max);
        if (best - brute).abs() > 1e-12 {
            best_ref_bad += 1;
        }
    }
    Outcome::new(
        f1_bad == 0 && auc_worst <= 1e-9 && best_bad == 0 && best_ref_bad == 0,
        format!("{instances} instances: F1 mismatches {f1_bad}, max AUC diff {auc_worst:.1e}, best<F1@0.5 {best_bad}, best-threshold vs brute force mismatches {best_ref_bad}"),
    )
}

// ---- 8-10. desk-scale training experiments ---------------------------------

pub const PROFILES: &str = "a:0.75,b:0.65,c:0.55";

pub struct Bench {
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl Bench {
    /// 2,000 training samples (seed 1) and a 200-sample held-out set (seed 2).
    pub fn desk() -> Self {
        let profiles = SignalProfile::parse_list(PROFILES).unwrap();
        let train = gen_samples(&GenConfig::new(64, 64, profiles.clone(), 1), 2000).unwrap();
        let test = gen_samples(&GenConfig::new(64, 64, profiles, 2), 200).unwrap();
        Bench { train, test }
    }

    pub fn subset(recs: &[SampleRecord], streams: &[&str]) -> Vec<SampleRecord> {
        let names: Vec<String> = streams.iter().map(|s| s.to_string()).collect();
        recs.iter().map(|r| r.select_signals(&names).unwrap()).collect()
    }

    pub fn test_refs(&self) -> Vec<&SampleRecord> {
        self.test.iter().collect()
    }
}

pub struct Run {
    pub model: OmgFuser,
    pub best: ParamStore<f32>,
    pub test_f1: f64,
    pub time: Duration,
}

/// Trains the desk preset on `streams` and scores the best-validation
/// parameters on the held-out set. `stream_drop = false` sets p_drop to 0.
pub fn desk_run(bench: &Bench, streams: &[&str], stream_drop: bool, seed: u64) -> Run {
    let specs: Vec<StreamSpec> = streams.iter().map(|s| StreamSpec::new(*s, 1)).collect();
    let mut cfg = ModelConfig::desk(specs);
    if !stream_drop {
        cfg.p_drop = 0.0;
    }
    let (model, store) = OmgFuser::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let train = Bench::subset(&bench.train, streams);
    let start = Instant::now();
    let t = omg_fuser::train::train_run(&model, store, &train, TrainConfig::desk(30, seed), None).unwrap();
    let time = start.elapsed();
    let best = t.best().clone();
    drop(t);
    let test_f1 = held_out(&model, &best, bench);
    Run { model, best, test_f1, time }
}

pub fn held_out(model: &OmgFuser, store: &ParamStore<f32>, bench: &Bench) -> f64 {
    let p = ModelPredictor { model, store, batch_size: 16 };
    mean_pixel_f1(&p, &bench.test_refs()).unwrap()
}

pub fn fusion_benefit(bench: &Bench, full: &Run) -> Outcome {
    let refs = bench.test_refs();
    let singles: Vec<(String, f64)> = ["a", "b", "c"].iter().map(|s| (s.to_string(), mean_pixel_f1(&SingleSignal(s.to_string()), &refs).unwrap())).collect();
    let avg = mean_pixel_f1(&AvgFusion { signals: vec!["a".into(), "b".into(), "c".into()] }, &refs).unwrap();
    let best_single = singles.iter().map(|s| s.1).fold(0.0, f64::max);
    let f = full.test_f1;
    Outcome::new(
        f >= best_single + 0.03 && f >= avg && full.time <= Duration::from_secs(1800),
        format!(
            "fused {f:.4} vs best single {best_single:.4} (+0.03 needed), avg-fusion {avg:.4}; singles {}; train time {}",
            singles.iter().map(|(n, v)| format!("{n}={v:.4}")).collect::<Vec<_>>().join(" "),
            secs(full.time)
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Entry `i` of each slice was trained with `seeds[i]`.
pub fn ablations(seeds: &[u64], full: &[f64], no_drop: &[f64], no_a: &[f64]) -> Outcome {
    let d: Vec<f64> = full.iter().zip(no_drop).map(|(a, b)| a - b).collect();
    let r: Vec<f64> = full.iter().zip(no_a).map(|(a, b)| a - b).collect();
    let (md, mr) = (median(d.clone()), median(r.clone()));
    Outcome::new(
        md > 0.0 && mr > 0.0,
        format!(
            "seeds {seeds:?}: full {full:.4?}; (a) no stream drop {no_drop:.4?}, median margin {md:+.4}; (b) without signal a {no_a:.4?}, median margin {mr:+.4}"
        ),
    )
}

pub fn expansion(bench: &Bench, two: &Run, scratch: &Run, seed: u64) -> Outcome {
    let exp = expand_stream(&two.model.config, &two.best, StreamSpec::new("a", 1), ExpandMode::StreamOnly, seed).unwrap();
    let base = TrainConfig::desk(30, seed);
    let cfg = expansion_config(&base, ExpandMode::StreamOnly);
    let names: Vec<String> = exp.model.config.streams.iter().map(|s| s.name.clone()).collect();
    let train: Vec<SampleRecord> = bench.train.iter().map(|r| r.select_signals(&names).unwrap()).collect();
    let start = Instant::now();
    let t = omg_fuser::train::train_run(&exp.model, exp.store, &train, cfg.clone(), None).unwrap();
    let time = start.elapsed();
    let frozen_ok = exp.copied.iter().all(|n| {
        let old = two.best.by_name(n).unwrap();
        [&t.store, t.best()].iter().all(|s| s.by_name(n).unwrap().data().iter().zip(old.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
    });
    let f = held_out(&exp.model, t.best(), bench);
    let ratio = f / scratch.test_f1;
    let budget = cfg.epochs as f64 / base.epochs as f64;
    Outcome::new(
        ratio >= 0.95 && frozen_ok && budget <= 0.25,
        format!(
            "2-signal {:.4}, expanded {f:.4}, 3-signal scratch {:.4}, recovery {:.1}%; {} frozen tensors unchanged: {frozen_ok}; {} of {} epochs ({})",
            two.test_f1,
            scratch.test_f1,
            100.0 * ratio,
            exp.copied.len(),
            cfg.epochs,
            base.epochs,
            secs(time)
        ),
    )
}

// ---- 11. determinism and serialization ----------------------------------------

fn small_run(seed: u64, dir: &std::path::Path) -> Vec<u8> {
    let profiles = SignalProfile::parse_list("a:0.75,b:0.6").unwrap();
    let recs = gen_samples(&GenConfig::new(32, 32, profiles, 9), 24).unwrap();
    let mut cfg = ModelConfig::tiny(vec![StreamSpec::new("a", 1), StreamSpec::new("b", 1)]);
    cfg.height = 32;
    cfg.width = 32;
    let (model, store) = OmgFuser::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut tc = TrainConfig::desk(3, seed);
    tc.batch_size = 4;
    omg_fuser::train::train_run(&model, store, &recs, tc, Some(dir)).unwrap();
    let mut all = Vec::new();
    for f in ["log.csv", "last.omgf", "best.omgf"] {
        all.extend(std::fs::read(dir.join(f)).unwrap());
    }
    all
}

pub fn determinism() -> Outcome {
    let d = tempfile::tempdir().unwrap();
    let (a, b, c) = (d.path().join("a"), d.path().join("b"), d.path().join("c"));
    let (ra, rb, rc) = (small_run(5, &a), small_run(5, &b), small_run(6, &c));
    let identical = ra == rb;
    let seed_matters = ra != rc;
    let ck = Checkpoint::load(&a.join("last.omgf")).unwrap();
    let bytes = std::fs::read(a.join("last.omgf")).unwrap();
    let round = ck.to_bytes().unwrap() == bytes && Checkpoint::from_bytes(&bytes).unwrap() == ck;
    let (_, store) = ck.instantiate(None).unwrap();
    let lossless = ck.params.iter().all(|(n, _, t)| store.by_name(n).unwrap().data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    Outcome::new(
        identical && seed_matters && round && lossless,
        format!("same seed bitwise identical: {identical}; different seed differs: {seed_matters}; checkpoint bytes round-trip: {round}; parameters bitwise: {lossless}"),
    )
}
