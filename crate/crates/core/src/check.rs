//! Self-verification: the object-mask builder against a brute-force oracle,
//! per-op gradient probes and an end-to-end model gradient check at 64-bit.

use std::collections::BTreeSet;
use std::fmt;

use omg_tensor::{AttentionShape, AttnMask, BnMode, Graph, GradCheck, OpKind, Tensor, Var, BLOCKED};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, StreamSpec};
use crate::data::{collate, gen_samples, GenConfig, SignalProfile};
use crate::error::{Error, Result};
use crate::model::{Batch, OmgFuser};
use crate::objects::{build_oga_mask, build_patch_object_sets, SegmentationMapSet};
use crate::params::Ctx;
use crate::train::{total_loss, LossWeights, Targets};

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Mask oracle plus a few probes only.
    pub quick: bool,
    pub fault: Option<OpKind>,
    pub seed: u64,
    pub mask_cases: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { quick: false, fault: None, seed: 0, mask_cases: 500 }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub name: String,
    /// Op families the probe exercises.
    pub ops: Vec<OpKind>,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Input and flat coordinate of the largest error.
    pub worst: Option<(String, usize)>,
}

impl ProbeResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

#[derive(Clone, Debug, Default)]
pub struct MaskOracleResult {
    pub cases: usize,
    pub mismatches: usize,
    pub first_failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub mask: MaskOracleResult,
    pub probes: Vec<ProbeResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.mask.mismatches == 0 && self.probes.iter().all(ProbeResult::passed)
    }

    /// Op families consistent with the failures: used by every failing probe
    /// and by no passing one.
    pub fn suspects(&self) -> Vec<OpKind> {
        let failing: Vec<&ProbeResult> = self.probes.iter().filter(|p| !p.passed()).collect();
        if failing.is_empty() {
            return Vec::new();
        }
        OpKind::ALL
            .iter()
            .copied()
            .filter(|k| failing.iter().all(|p| p.ops.contains(k)))
            .filter(|k| !self.probes.iter().any(|p| p.passed() && p.ops.contains(k)))
            .collect()
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.mask;
        writeln!(f, "{} mask-oracle cases={} mismatches={}", if m.mismatches == 0 { "PASS" } else { "FAIL" }, m.cases, m.mismatches)?;
        if let Some(d) = &m.first_failure {
            writeln!(f, "     first mismatch: {d}")?;
        }
        for p in &self.probes {
            write!(f, "{} grad {:<18} max_rel_err={:.3e} coords={}", if p.passed() { "PASS" } else { "FAIL" }, p.name, p.max_rel_error, p.checked)?;
            match (&p.worst, p.passed()) {
                (Some((t, c)), false) => writeln!(f, " worst={t}[{c}]")?,
                _ => writeln!(f)?,
            }
        }
        let s = self.suspects();
        if !s.is_empty() {
            let names: Vec<&str> = s.iter().map(|k| k.name()).collect();
            writeln!(f, "faulty op: {}", names.join(", "))?;
        }
        Ok(())
    }
}

pub fn run_checks(opts: &CheckOptions) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mask = mask_oracle(&mut rng, if opts.quick { opts.mask_cases.min(60) } else { opts.mask_cases });
    let quick = opts.quick && opts.fault.is_none();
    let mut probes = Vec::new();
    for probe in op_probes() {
        if quick && !QUICK_PROBES.contains(&probe.name) {
            continue;
        }
        probes.push(probe.run(opts.fault, opts.seed)?);
    }
    if !quick {
        probes.push(model_probe(opts.fault, opts.seed)?);
    }
    Ok(CheckReport { mask, probes })
}

const QUICK_PROBES: [&str; 3] = ["linear", "attention", "layer_norm"];

fn random_segmentation(rng: &mut ChaCha8Rng) -> (SegmentationMapSet, usize) {
    let p = [1, 2, 4, 8][rng.gen_range(0..4)];
    let (gh, gw) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
    let (h, w) = (gh * p, gw * p);
    let k = rng.gen_range(0..=5);
    let maps = (0..k)
        .map(|_| {
            if rng.gen_bool(0.3) {
                let q: f64 = rng.gen_range(0.02..0.3);
                (0..h * w).map(|_| rng.gen_bool(q)).collect()
            } else {
                let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let (y1, x1) = (rng.gen_range(y0 + 1..=h), rng.gen_range(x0 + 1..=w));
                (0..h * w).map(|i| (y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))).collect()
            }
        })
        .collect();
    let mut seg = SegmentationMapSet::new(h, w, maps).expect("sizes match");
    seg.background = rng.gen_bool(0.8);
    (seg, p)
}

/// Object ids of every patch, collected pixel by pixel.
fn oracle_sets(seg: &SegmentationMapSet, p: usize) -> Vec<BTreeSet<u32>> {
    let gw = seg.width / p;
    let mut sets = vec![BTreeSet::new(); (seg.height / p) * gw];
    for y in 0..seg.height {
        for x in 0..seg.width {
            sets[(y / p) * gw + x / p].extend(seg.objects_at(y, x));
        }
    }
    sets
}

fn mask_oracle(rng: &mut ChaCha8Rng, cases: usize) -> MaskOracleResult {
    let mut out = MaskOracleResult { cases, ..Default::default() };
    for case in 0..cases {
        let (seg, p) = random_segmentation(rng);
        let l = (seg.height / p) * (seg.width / p);
        let sets = oracle_sets(&seg, p);
        let some_patch_empty = sets.iter().any(BTreeSet::is_empty);
        let built = build_patch_object_sets(&seg, p).and_then(|s| build_oga_mask(&s));
        let problem = match built {
            Err(_) if some_patch_empty => None,
            Err(e) => Some(format!("builder failed: {e}")),
            Ok(_) if some_patch_empty => Some("builder accepted a patch with no object".to_string()),
            Ok(mask) => {
                let mut bad = None;
                'outer: for u in 0..l {
                    for v in 0..l {
                        let expect = !sets[u].is_disjoint(&sets[v]);
                        let entry = mask.entry(u, v);
                        let ok = if expect { entry == 0.0 } else { entry == BLOCKED };
                        if !ok {
                            bad = Some(format!("pair ({u}, {v}) expected {}", if expect { "allowed" } else { "blocked" }));
                            break 'outer;
                        }
                    }
                }
                bad
            }
        };
        if let Some(d) = problem {
            out.mismatches += 1;
            if out.first_failure.is_none() {
                out.first_failure = Some(format!("case {case} ({}x{}, p={p}, K={}): {d}", seg.height, seg.width, seg.len()));
            }
        }
    }
    out
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var], &[Tensor<f64>]) -> omg_tensor::Result<Var>>;

struct Probe {
    name: &'static str,
    /// `(shape, low, high)` per input.
    inputs: Vec<(Vec<usize>, f64, f64)>,
    /// Fixed non-differentiated tensors handed to `build`.
    fixed: Vec<(Vec<usize>, f64, f64)>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// `sum(out * w)` for a fixed weight tensor, so every output coordinate matters.
fn project(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> omg_tensor::Result<Var> {
    let w = g.constant(w.clone());
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

impl Probe {
    fn run(&self, fault: Option<OpKind>, seed: u64) -> Result<ProbeResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(self.name));
        let params: Vec<Tensor<f64>> = self.inputs.iter().map(|(s, lo, hi)| uniform(&mut rng, s, *lo, *hi)).collect();
        let fixed: Vec<Tensor<f64>> = self.fixed.iter().map(|(s, lo, hi)| uniform(&mut rng, s, *lo, *hi)).collect();
        let ops = {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            (self.build)(&mut g, &vars, &fixed)?;
            g.op_kinds()
        };
        let check = GradCheck { h: 1e-5, max_coords_per_tensor: Some(24), fault };
        let rep = check.run(|g, v| (self.build)(g, v, &fixed), &params)?;
        let worst = rep.worst.map(|(t, c)| (format!("input{t}"), c));
        Ok(ProbeResult { name: self.name.to_string(), ops, max_rel_error: rep.max_rel_error, checked: rep.checked, worst })
    }
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn probe(name: &'static str, inputs: Vec<(Vec<usize>, f64, f64)>, fixed: Vec<(Vec<usize>, f64, f64)>, build: Build) -> Probe {
    Probe { name, inputs, fixed, build }
}

fn v(shape: &[usize]) -> (Vec<usize>, f64, f64) {
    (shape.to_vec(), -1.0, 1.0)
}

fn op_probes() -> Vec<Probe> {
    let mut out = vec![
        probe("sum", vec![v(&[3, 4])], vec![], Box::new(|g, x, _| Ok(g.sum(x[0])))),
        probe("mean", vec![v(&[3, 4])], vec![], Box::new(|g, x, _| Ok(g.mean(x[0])))),
        probe("mul", vec![v(&[3, 4])], vec![v(&[3, 4])], Box::new(|g, x, f| project(g, x[0], &f[0]))),
        probe("matmul", vec![v(&[3, 4]), v(&[4, 5])], vec![v(&[3, 5])], Box::new(|g, x, f| {
            let y = g.matmul(x[0], x[1])?;
            project(g, y, &f[0])
        })),
        probe("linear", vec![v(&[2, 3, 4]), v(&[4, 5]), v(&[5])], vec![v(&[2, 3, 5])], Box::new(|g, x, f| {
            let y = g.linear(x[0], x[1], Some(x[2]))?;
            project(g, y, &f[0])
        })),
        probe("add_sub", vec![v(&[3, 4]), v(&[3, 4])], vec![v(&[3, 4])], Box::new(|g, x, f| {
            let a = g.add(x[0], x[1])?;
            let s = g.sub(a, x[1])?;
            let y = g.sub(s, x[1])?;
            project(g, y, &f[0])
        })),
        probe("add_tiled", vec![v(&[6, 4]), v(&[4])], vec![v(&[6, 4])], Box::new(|g, x, f| {
            let y = g.add_tiled(x[0], x[1])?;
            project(g, y, &f[0])
        })),
        probe("scale_row_scale", vec![v(&[4, 3])], vec![v(&[4, 3])], Box::new(|g, x, f| {
            let s = g.scale(x[0], 0.7);
            let y = g.row_scale(s, vec![1.0, 0.0, -2.0, 0.5])?;
            project(g, y, &f[0])
        })),
        probe("relu", vec![v(&[3, 5])], vec![v(&[3, 5])], Box::new(|g, x, f| {
            // keep inputs away from the kink at 0
            let c = g.constant(Tensor::full(vec![3, 5], 0.02));
            let a = g.mul(x[0], x[0])?;
            let s = g.add(a, c)?;
            let t = g.scale(x[0], 1.0);
            let y0 = g.relu(t);
            let y1 = g.relu(s);
            let y = g.add(y0, y1)?;
            project(g, y, &f[0])
        })),
        probe("sigmoid", vec![(vec![3, 5], -3.0, 3.0)], vec![v(&[3, 5])], Box::new(|g, x, f| {
            let y = g.sigmoid(x[0]);
            project(g, y, &f[0])
        })),
        probe("gelu", vec![(vec![3, 5], -3.0, 3.0)], vec![v(&[3, 5])], Box::new(|g, x, f| {
            let y = g.gelu(x[0]);
            project(g, y, &f[0])
        })),
        probe("log_clamp", vec![(vec![3, 5], 0.2, 2.0)], vec![v(&[3, 5])], Box::new(|g, x, f| {
            let c = g.clamp(x[0], 0.1, 5.0);
            let y = g.log(c)?;
            project(g, y, &f[0])
        })),
        probe("masked_softmax", vec![(vec![2, 3, 4], -2.0, 2.0)], vec![v(&[2, 3, 4])], Box::new(|g, x, f| {
            let mut m = vec![0.0; 24];
            for r in 0..6 {
                m[r * 4 + (r % 3) + 1] = BLOCKED;
            }
            let y = g.masked_softmax(x[0], &Tensor::new(vec![2, 3, 4], m).expect("24 entries"))?;
            project(g, y, &f[0])
        })),
        probe("layer_norm", vec![v(&[5, 6]), (vec![6], 0.5, 1.5), v(&[6])], vec![v(&[5, 6])], Box::new(|g, x, f| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-6)?;
            project(g, y, &f[0])
        })),
        probe("attention", vec![v(&[2 * 5, 8]), v(&[2 * 5, 8]), v(&[2 * 5, 8])], vec![v(&[10, 8])], Box::new(|g, x, f| {
            let mut mask = vec![0.0; 2 * 25];
            for (i, m) in mask.iter_mut().enumerate() {
                let (u, w) = ((i % 25) / 5, i % 5);
                if u != w && (u + w + i / 25) % 3 == 0 {
                    *m = BLOCKED;
                }
            }
            let y = g.attention(x[0], x[1], x[2], AttentionShape::self_attention(2, 5, 2), AttnMask::PerGroup(&mask))?;
            project(g, y, &f[0])
        })),
        probe("conv2d", vec![v(&[2, 2, 6, 6]), v(&[3, 2, 3, 3]), v(&[3])], vec![v(&[2, 3, 3, 3])], Box::new(|g, x, f| {
            let y = g.conv2d(x[0], x[1], Some(x[2]), 2)?;
            project(g, y, &f[0])
        })),
        probe("conv_transpose2d", vec![v(&[2, 3, 3, 3]), v(&[3, 2, 3, 3]), v(&[2])], vec![v(&[2, 2, 6, 6])], Box::new(|g, x, f| {
            let y = g.conv_transpose2d(x[0], x[1], Some(x[2]), 2)?;
            project(g, y, &f[0])
        })),
        probe("batch_norm", vec![v(&[3, 2, 2, 2]), (vec![2], 0.5, 1.5), v(&[2])], vec![v(&[3, 2, 2, 2])], Box::new(|g, x, f| {
            let (y, _) = g.batch_norm(x[0], x[1], x[2], 1e-5, BnMode::Train)?;
            project(g, y, &f[0])
        })),
        probe("shape_ops", vec![v(&[2, 3, 4]), v(&[2, 3, 4])], vec![v(&[2, 4, 3, 3])], Box::new(|g, x, f| {
            let c = g.concat(&[x[0], x[1]], 2)?;
            let n = g.narrow(c, 2, 1, 6)?;
            let p = g.permute(n, &[0, 2, 1])?;
            let r = g.reshape(p, &[4, 3, 3])?;
            let y = g.repeat(r, 2)?;
            project(g, y, &f[0])
        })),
    ];
    out.push(probe("losses", vec![(vec![2, 8], 0.05, 0.95)], vec![], Box::new(|g, x, _| {
        let t: Vec<f64> = (0..16).map(|i| if i % 3 == 0 || i == 9 { 1.0 } else { 0.0 }).collect();
        let a = g.balanced_bce(x[0], &t, 2)?;
        let b = g.dice_loss(x[0], &t, 2)?;
        let c = g.bce(x[0], &t)?;
        let s = g.add(a, b)?;
        let s = g.add(s, c)?;
        Ok(g.sum(s))
    })));
    out
}

/// Gradient of the full training loss with respect to every weight of a
/// small model, stream drop and batch statistics included.
fn model_probe(fault: Option<OpKind>, seed: u64) -> Result<ProbeResult> {
    let profiles = SignalProfile::parse_list("a:0.7,b:0.6")?;
    let mut cfg = ModelConfig::tiny(vec![StreamSpec::new("a", 1), StreamSpec::new("b", 1)]);
    cfg.p_drop = 0.4;
    let (model, store) = OmgFuser::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let store = store.cast::<f64>();
    let mut gen = GenConfig::new(16, 16, profiles, seed);
    gen.forged_ratio = 1.0;
    let recs = gen_samples(&gen, 1)?;
    let refs: Vec<_> = recs.iter().collect();
    let names: Vec<String> = model.config.streams.iter().map(|s| s.name.clone()).collect();
    let (b32, t32) = collate(&refs, &names, model.config.patch)?;
    let batch = Batch { samples: b32.samples, image: b32.image.cast(), signals: b32.signals.iter().map(|s| s.cast()).collect(), masks: b32.masks.clone() };
    let targets = Targets { samples: t32.samples, loc: t32.loc.iter().map(|&x| x as f64).collect(), det: t32.det.iter().map(|&x| x as f64).collect() };
    // move off the initialization, where zero biases put ReLU inputs exactly on the kink
    let mut jitter = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
    let params: Vec<Tensor<f64>> = store
        .ids()
        .map(|id| {
            let mut t = store.get(id).clone();
            if store.is_trainable(id) {
                t.data_mut().iter_mut().for_each(|x| *x += jitter.gen_range(-0.05..0.05));
            }
            t
        })
        .collect();
    let err = std::cell::RefCell::new(None);
    let build = |g: &mut Graph<f64>, vars: &[Var]| -> omg_tensor::Result<Var> {
        let mut ctx = Ctx::with_leaves(std::mem::take(g), &store, vars, true).expect("one leaf per parameter");
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
        let root = model
            .forward(&mut ctx, &batch, Some(&mut drop_rng))
            .and_then(|pred| total_loss(&mut ctx, &pred, &targets, LossWeights::default()).map(|l| l.total));
        *g = ctx.into_graph();
        match root {
            Ok(v) => Ok(v),
            Err(e) => {
                let msg = e.to_string();
                *err.borrow_mut() = Some(e);
                Err(omg_tensor::TensorError::Precondition { op: "model", msg })
            }
        }
    };
    let ops = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        build(&mut g, &vars)?;
        g.op_kinds()
    };
    let check = GradCheck { h: 1e-5, max_coords_per_tensor: Some(3), fault };
    let rep = check.run(build, &params).map_err(|e| err.borrow_mut().take().unwrap_or(Error::Tensor(e)))?;
    let worst = rep.worst.map(|(t, c)| (store.name(store.ids().nth(t).expect("tensor index in range")).to_string(), c));
    Ok(ProbeResult { name: "model_end_to_end".into(), ops, max_rel_error: rep.max_rel_error, checked: rep.checked, worst })
}
