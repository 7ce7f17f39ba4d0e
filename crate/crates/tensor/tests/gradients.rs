//! Finite-difference checks of every differentiable op at 64-bit.

use omg_tensor::{finite_diff_check, AttentionShape, AttnMask, BnMode, GradCheck, Graph, OpKind, Result, Tensor, Var, BLOCKED};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts the output with fixed random weights so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(random(&mut rng, &shape));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(name: &str, params: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let err = finite_diff_check(build, params, H).unwrap();
    assert!(err < TOL, "{name}: relative error {err}");
}

#[test]
fn matmul_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ps = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 5]), random(&mut rng, &[5])];
    check("matmul", &ps[..2], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 7)
    });
    check("linear", &ps, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        project(g, y, 7)
    });
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[2, 3]);
    let row = random(&mut rng, &[3]);
    check("add/sub/mul", &[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        project(g, m, 3)
    });
    check("add_tiled/scale/row_scale", &[a.clone(), row], |g, v| {
        let t = g.add_tiled(v[0], v[1])?;
        let s = g.scale(t, 0.7);
        let r = g.row_scale(s, vec![2.0, -0.5])?;
        project(g, r, 4)
    });
    check("gelu/sigmoid/mean", &[a.clone()], |g, v| {
        let x = g.gelu(v[0]);
        let y = g.sigmoid(x);
        let p = g.mul(y, y)?;
        Ok(g.mean(p))
    });
    // keep inputs away from the relu kink and clamp bounds
    let pos = Tensor::from_f64(vec![4], &[0.3, -0.4, 0.8, -0.9]).unwrap();
    check("relu/clamp", &[pos], |g, v| {
        let r = g.relu(v[0]);
        let c = g.clamp(v[0], -0.5, 0.5);
        let s = g.add(r, c)?;
        project(g, s, 5)
    });
    let positive = Tensor::from_f64(vec![3], &[0.5, 1.5, 2.5]).unwrap();
    check("log", &[positive], |g, v| {
        let l = g.log(v[0])?;
        project(g, l, 6)
    });
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[2, 3, 4]);
    let b = random(&mut rng, &[2, 1, 4]);
    check("permute/reshape/concat/narrow/repeat", &[a, b], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let r = g.reshape(p, &[4, 6])?;
        let c = g.concat(&[v[0], v[1]], 1)?;
        let n = g.narrow(c, 1, 2, 2)?;
        let rep = g.repeat(n, 3)?;
        let s1 = project(g, r, 1)?;
        let s2 = project(g, rep, 2)?;
        g.add(s1, s2)
    });
}

#[test]
fn masked_softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 4]);
    let mask = Tensor::from_f64(vec![3, 4], &[0., BLOCKED, 0., 0., BLOCKED, BLOCKED, 0., 0., 0., 0., 0., 0.]).unwrap();
    check("masked_softmax", &[x], |g, v| {
        let y = g.masked_softmax(v[0], &mask)?;
        project(g, y, 8)
    });
}

#[test]
fn masked_softmax_cross_entropy_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[4, 5]);
    let mut mask = vec![0.0; 20];
    for r in 0..4 {
        mask[r * 5 + (r + 1) % 5] = BLOCKED;
    }
    let mask = Tensor::new(vec![4, 5], mask).unwrap();
    let target = Tensor::from_f64(vec![4, 5], &[1., 0., 0., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0., 1.]).unwrap();
    let err = finite_diff_check(
        |g, v| {
            let p = g.masked_softmax(v[0], &mask)?;
            // blocked entries are exactly zero
            let p = g.clamp(p, 1e-300, 1.0);
            let l = g.log(p)?;
            let t = g.constant(target.clone());
            let m = g.mul(l, t)?;
            let s = g.sum(m);
            Ok(g.scale(s, -1.0))
        },
        &[x],
        H,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ps = [random(&mut rng, &[3, 5]), random(&mut rng, &[5]), random(&mut rng, &[5])];
    check("layer_norm", &ps, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(g, y, 9)
    });
}

#[test]
fn attention_gradient_masked_multi_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (groups, len, d) = (2, 4, 6);
    let ps = [random(&mut rng, &[groups * len, d]), random(&mut rng, &[groups * len, d]), random(&mut rng, &[groups * len, d])];
    let mut mask = vec![0.0; groups * len * len];
    for u in 0..len {
        for w in 0..len {
            if (u < 2) != (w < 2) {
                mask[len * len + u * len + w] = BLOCKED;
            }
        }
    }
    check("attention", &ps, |g, v| {
        let y = g.attention(v[0], v[1], v[2], AttentionShape::self_attention(groups, len, 2), AttnMask::PerGroup(&mask))?;
        project(g, y, 10)
    });
}

#[test]
fn attention_gradient_cross_lengths_shared_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = random(&mut rng, &[3, 4]);
    let kv = random(&mut rng, &[3 * 5, 4]);
    check("cross attention", &[q, kv], |g, v| {
        let shape = omg_tensor::AttentionShape { groups: 3, q_len: 1, kv_len: 5, heads: 2 };
        let y = g.attention(v[0], v[1], v[1], shape, AttnMask::None)?;
        project(g, y, 11)
    });
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ps = [random(&mut rng, &[2, 2, 4, 4]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[3])];
    for stride in [1, 2] {
        check("conv2d", &ps, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride)?;
            project(g, y, 12)
        });
    }
    let ps = [random(&mut rng, &[2, 3, 2, 2]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[2])];
    for stride in [1, 2] {
        check("conv_transpose2d", &ps, |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), stride)?;
            project(g, y, 13)
        });
    }
}

#[test]
fn batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ps = [random(&mut rng, &[2, 3, 2, 2]), random(&mut rng, &[3]), random(&mut rng, &[3])];
    check("batch_norm train", &ps, |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5, BnMode::Train)?;
        project(g, y, 14)
    });
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    check("batch_norm eval", &ps, |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5, BnMode::Eval { mean: &mean, var: &var })?;
        project(g, y, 15)
    });
}

#[test]
fn loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pred = Tensor::new(vec![2, 8], (0..16).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
    let target: Vec<f64> = (0..16).map(|i| if i % 3 == 0 || i >= 12 { 1.0 } else { 0.0 }).collect();
    check("balanced_bce", &[pred.clone()], |g, v| g.balanced_bce(v[0], &target, 2));
    check("dice", &[pred.clone()], |g, v| g.dice_loss(v[0], &target, 2));
    check("bce", &[pred], |g, v| g.bce(v[0], &target));
}

#[test]
fn check_detects_a_wrong_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ps = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])];
    let report = GradCheck { fault: Some(OpKind::MatMul), ..GradCheck::default() }
        .run(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, 16)
            },
            &ps,
        )
        .unwrap();
    assert!(report.max_rel_error > 1e-2, "{report:?}");
}
