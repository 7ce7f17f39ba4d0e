//! Forward values against independent reference computations.

use omg_tensor::{AttentionShape, AttnMask, Graph, Tensor, BLOCKED};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[5, 7]);
    let b = random(&mut rng, &[7, 3]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut want = 0.0;
            for k in 0..7 {
                want += a.get(&[i, k]) * b.get(&[k, j]);
            }
            let got = g.value(c).get(&[i, j]);
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12), "({i},{j}) {got} vs {want}");
        }
    }
}

#[test]
fn matmul_f32_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[33, 40]);
    let b = random(&mut rng, &[40, 17]);
    let mut g = Graph::<f32>::new();
    let (va, vb) = (g.constant(a.cast()), g.constant(b.cast()));
    let c = g.matmul(va, vb).unwrap();
    for i in 0..33 {
        for j in 0..17 {
            let want: f64 = (0..40).map(|k| a.get(&[i, k]) * b.get(&[k, j])).sum();
            assert!((g.value(c).get(&[i, j]) as f64 - want).abs() < 1e-4);
        }
    }
}

#[test]
fn layer_norm_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[3, 6]);
    let gain = random(&mut rng, &[6]);
    let bias = random(&mut rng, &[6]);
    let eps = 1e-5;
    let mut g = Graph::new();
    let (vx, vg, vb) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let y = g.layer_norm(vx, vg, vb, eps).unwrap();
    for r in 0..3 {
        let row: Vec<f64> = (0..6).map(|c| x.get(&[r, c])).collect();
        let mu = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 6.0;
        for c in 0..6 {
            let want = (row[c] - mu) / (var + eps).sqrt() * gain.data()[c] + bias.data()[c];
            assert!((g.value(y).get(&[r, c]) - want).abs() < 1e-6);
        }
    }
}

#[test]
fn layer_norm_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[4, 16]);
    let mut g = Graph::new();
    let vx = g.constant(x);
    let ones = g.constant(Tensor::full(vec![16], 1.0));
    let zeros = g.constant(Tensor::zeros(vec![16]));
    let y = g.layer_norm(vx, ones, zeros, 1e-5).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mu = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
        assert!(mu.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn gelu_is_x_times_normal_cdf() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![3], &[0.0, 1.0, -2.0]).unwrap());
    let y = g.gelu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 0.841345).abs() < 1e-5);
    // Phi(-2) = 0.0227501319
    assert!((v[2] + 2.0 * 0.022750131948179).abs() < 1e-9);
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Vec<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (h / stride, wd / stride);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad;
                                let ix = (ox * stride + kx) as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.get(&[bi, ci, iy as usize, ix as usize]) * w.get(&[co, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for stride in [1, 2] {
        let x = random(&mut rng, &[2, 3, 6, 8]);
        let w = random(&mut rng, &[4, 3, 3, 3]);
        let mut g = Graph::new();
        let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(vx, vw, None, stride).unwrap();
        let want = conv_oracle(&x, &w, stride);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }
}

#[test]
fn conv2d_delta_kernel_subsamples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[1, 1, 6, 6]);
    let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let mut g = Graph::new();
    let (vx, vw) = (g.constant(x.clone()), g.constant(w));
    let y = g.conv2d(vx, vw, None, 2).unwrap();
    for oy in 0..3 {
        for ox in 0..3 {
            assert_eq!(g.value(y).get(&[0, 0, oy, ox]), x.get(&[0, 0, 2 * oy, 2 * ox]));
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn transposed_conv_is_the_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for stride in [1, 2] {
        // conv: [1, 2, 4, 4] -> [1, 3, 4/s, 4/s]; weight [3, 2, 3, 3]
        let x = random(&mut rng, &[1, 2, 4, 4]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let y = random(&mut rng, &[1, 3, 4 / stride, 4 / stride]);
        let mut g = Graph::new();
        let (vx, vw, vy) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
        let cx = g.conv2d(vx, vw, None, stride).unwrap();
        // same weight tensor read as [Cin=3, Cout=2, 3, 3] for the transposed direction
        let ty = g.conv_transpose2d(vy, vw, None, stride).unwrap();
        assert_eq!(g.shape(ty), x.shape());
        let lhs = dot(g.value(cx).data(), y.data());
        let rhs = dot(x.data(), g.value(ty).data());
        assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0), "stride {stride}: {lhs} vs {rhs}");
    }
}

#[test]
fn transposed_conv_single_channel_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[1, 1, 4, 4]);
    let w = random(&mut rng, &[1, 1, 3, 3]);
    let y = random(&mut rng, &[1, 1, 2, 2]);
    let mut g = Graph::new();
    let (vx, vw, vy) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
    let cx = g.conv2d(vx, vw, None, 2).unwrap();
    let ty = g.conv_transpose2d(vy, vw, None, 2).unwrap();
    assert_eq!(g.shape(ty), &[1, 1, 4, 4]);
    let lhs = dot(g.value(cx).data(), y.data());
    let rhs = dot(x.data(), g.value(ty).data());
    assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0));
}

/// Hand-rolled single-head attention on an explicit 3-token case.
#[test]
fn attention_matches_explicit_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (l, d) = (3, 4);
    let q = random(&mut rng, &[l, d]);
    let k = random(&mut rng, &[l, d]);
    let v = random(&mut rng, &[l, d]);
    let mask = [0.0, BLOCKED, 0.0, 0.0, 0.0, BLOCKED, BLOCKED, 0.0, 0.0];
    let mut g = Graph::new();
    let (vq, vk, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(vq, vk, vv, AttentionShape::self_attention(1, l, 1), AttnMask::Shared(&mask)).unwrap();
    for u in 0..l {
        let logits: Vec<f64> = (0..l)
            .map(|w| ((0..d).map(|c| q.get(&[u, c]) * k.get(&[w, c])).sum::<f64>() + mask[u * l + w]) / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..d {
            let want: f64 = (0..l).map(|w| e[w] / z * v.get(&[w, c])).sum();
            assert!((g.value(out).get(&[u, c]) - want).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_per_group_masks_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[2 * 3, 4]);
    // group 0 fully open, group 1 identity-only
    let mut mask = vec![0.0; 9];
    mask.extend([0.0, BLOCKED, BLOCKED, BLOCKED, 0.0, BLOCKED, BLOCKED, BLOCKED, 0.0]);
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let out = g.attention(vx, vx, vx, AttentionShape::self_attention(2, 3, 2), AttnMask::PerGroup(&mask)).unwrap();
    // identity-only rows copy V exactly
    for r in 3..6 {
        for c in 0..4 {
            assert!((g.value(out).get(&[r, c]) - x.get(&[r, c])).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_are_distributions(
        seed in 0u64..10_000,
        rows in 1usize..6,
        cols in 1usize..9,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-20.0..20.0)).collect()).unwrap();
        let mut mask = vec![0.0; rows * cols];
        for r in 0..rows {
            let keep = rng.gen_range(0..cols);
            for c in 0..cols {
                if c != keep && rng.gen_bool(0.5) {
                    mask[r * cols + c] = BLOCKED;
                }
            }
        }
        let mask_t = Tensor::new(vec![rows, cols], mask.clone()).unwrap();
        let mut g = Graph::new();
        let v = g.constant(logits);
        let y = g.masked_softmax(v, &mask_t).unwrap();
        for (r, row) in g.value(y).data().chunks(cols).enumerate() {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for c in 0..cols {
                if mask[r * cols + c] == BLOCKED {
                    prop_assert!(row[c] <= 1e-30);
                }
            }
        }
    }
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, &[2, 2, 8, 8]).cast::<f32>();
        let w = random(&mut rng, &[3, 2, 3, 3]).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let (vx, vw) = (g.param(x), g.param(w));
        let y = g.conv2d(vx, vw, None, 2).unwrap();
        let y = g.gelu(y);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let mut bits: Vec<u32> = g.value(y).data().iter().map(|v| v.to_bits()).collect();
        bits.extend(g.grad(vw).unwrap().data().iter().map(|v| v.to_bits()));
        bits
    };
    assert_eq!(run(), run());
}
