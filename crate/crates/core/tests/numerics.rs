use csdasa::numerics::{grad_check, kernels, ParamGroup, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Six nested loops, zero padding, no slicing tricks.
fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let p = (ks / 2) as isize;
    let mut out = vec![0.0; n * co * h * w];
    for bi in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b.data()[o];
                    for i in 0..ci {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let sy = y as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += k.get(&[o, i, ky, kx]) * x.get(&[bi, i, sy as usize, sx as usize]);
                            }
                        }
                    }
                    out[((bi * co + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, h, w], out).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get(&[i, p]) * b.get(&[p, j]);
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn conv_eval(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (x, k, b) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(x, k, Some(b)).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_zero_input_yields_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = random_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let y = conv_eval(&Tensor::zeros(&[1, 2, 5, 5]), &k, &b);
    for o in 0..3 {
        for i in 0..25 {
            assert_eq!(y.data()[o * 25 + i], b.data()[o]);
        }
    }
}

#[test]
fn conv_unit_impulse_reads_kernel_centre() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = random_tensor(&mut rng, &[1, 1, 3, 3]);
    let mut x = Tensor::zeros(&[1, 1, 3, 3]);
    x.data_mut()[4] = 1.0;
    let y = conv_eval(&x, &k, &Tensor::zeros(&[1]));
    assert_eq!(y.get(&[0, 0, 1, 1]), k.get(&[0, 0, 1, 1]));
    // Cross-correlation: output at (0,0) sees the impulse through K[2,2].
    assert_eq!(y.get(&[0, 0, 0, 0]), k.get(&[0, 0, 2, 2]));
}

#[test]
fn conv_matches_nested_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[2, 3, 8, 8]);
    let k = random_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = random_tensor(&mut rng, &[4]);
    let fast = conv_eval(&x, &k, &b);
    let slow = naive_conv(&x, &k, &b);
    assert_eq!(fast.shape(), &[2, 4, 8, 8]);
    assert!(fast.max_abs_diff(&slow) <= 1e-12);
}

#[test]
fn conv_rejects_mismatched_channels_and_even_kernels() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(tape.conv2d(x, k, None).is_err());
    let k2 = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(tape.conv2d(x, k2, None).is_err());
}

#[test]
fn elementwise_closed_forms() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    let t = tape.tanh(z);
    assert_eq!(tape.value(s).data(), &[0.5]);
    assert_eq!(tape.value(t).data(), &[0.0]);
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.mul(a, b).is_err());
    let c = tape.constant(Tensor::scalar(2.0));
    let d = tape.add(a, c).unwrap();
    assert_eq!(tape.value(d).data(), &[2.0; 6]);
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let ones = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
    let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let p = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(p).data(), &[3.0, 7.0]);
    let q = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.value(q), tape.value(a));
    assert!(tape.matmul(ones, a).is_err());
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_tensor(&mut rng, &[5, 4]);
    let b = random_tensor(&mut rng, &[4, 6]);
    let fast = Tensor::new(vec![5, 6], kernels::matmul(a.data(), b.data(), 1, 5, 4, 6)).unwrap();
    assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
}

fn softmax_of(values: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![values.len()], values.to_vec()).unwrap());
    let y = tape.softmax(x);
    tape.value(y).data().to_vec()
}

/// exp(x_i - logsumexp) with the log-sum computed by compensated summation.
fn softmax_reference(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let y = (v - max).exp() - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    let lse = max + sum.ln();
    values.iter().map(|v| (v - lse).exp()).collect()
}

#[test]
fn softmax_closed_forms() {
    for v in softmax_of(&[0.0, 0.0, 0.0]) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = softmax_of(&[1000.0, 0.0, 0.0]);
    assert!((s[0] - 1.0).abs() < 1e-9 && s[1] < 1e-9 && s[2] < 1e-9);
    assert!(s.iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values: Vec<f64> = (0..17).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let fast = softmax_of(&values);
    let slow = softmax_reference(&values);
    for (a, b) in fast.iter().zip(&slow) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(tape.backward(x).is_err());
    let fail = grad_check(|_, v| Ok(v[0]), &[Tensor::zeros(&[2])], 1e-6);
    assert!(fail.is_err());
}

#[test]
fn quadratic_gradient() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap(), &[2.0, 4.0]);
    let report = grad_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        },
        &[x],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-9, "{report:?}");
}

#[test]
fn frozen_parameter_gets_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", ParamGroup::Shared, Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
    let u = store.add("u", ParamGroup::Classifier, Tensor::new(vec![2], vec![0.5, 2.0]).unwrap());
    store.get_mut(w).frozen = true;
    let mut tape = Tape::new();
    let (wv, uv) = (tape.param(&store, w), tape.param(&store, u));
    let p = tape.mul(wv, uv).unwrap();
    let loss = tape.sum(p);
    let grads = tape.backward(loss).unwrap();
    let collected = store.collect_grads(&tape, &grads);
    assert!(collected[0].is_none());
    assert_eq!(grads.get_or_zeros(wv, 2), vec![0.0, 0.0]);
    assert_eq!(collected[1].as_deref(), Some(&[1.0, -1.0][..]));
}

/// Weighted sum with fixed pseudo-random weights so every output element
/// contributes a distinct gradient.
fn probe(t: &mut Tape, x: Var, seed: u64) -> csdasa::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(x).to_vec();
    let w = t.constant(random_tensor(&mut rng, &shape));
    let p = t.mul(x, w)?;
    Ok(t.sum(p))
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> csdasa::Result<Var>, shapes: &[&[usize]], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
    grad_check(f, &params, 1e-6).unwrap().max_rel_error
}

#[test]
fn isolated_op_gradients() {
    let tol = 1e-6;
    let cases: Vec<(&str, f64)> = vec![
        ("conv2d", check(|t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]))?; probe(t, y, 9) }, &[&[2, 2, 4, 4], &[3, 2, 3, 3], &[3]], 10)),
        ("sigmoid", check(|t, v| { let y = t.sigmoid(v[0]); probe(t, y, 9) }, &[&[3, 4]], 11)),
        ("tanh", check(|t, v| { let y = t.tanh(v[0]); probe(t, y, 9) }, &[&[3, 4]], 12)),
        ("add", check(|t, v| { let y = t.add(v[0], v[1])?; probe(t, y, 9) }, &[&[3, 4], &[3, 4]], 13)),
        ("sub", check(|t, v| { let y = t.sub(v[0], v[1])?; probe(t, y, 9) }, &[&[3, 4], &[1]], 14)),
        ("mul", check(|t, v| { let y = t.mul(v[0], v[1])?; probe(t, y, 9) }, &[&[3, 4], &[3, 4]], 15)),
        ("mul_scalar", check(|t, v| { let y = t.mul(v[1], v[0])?; probe(t, y, 9) }, &[&[3, 4], &[1]], 16)),
        ("matmul", check(|t, v| { let y = t.matmul(v[0], v[1])?; probe(t, y, 9) }, &[&[2, 3, 4], &[2, 4, 5]], 17)),
        ("transpose", check(|t, v| { let y = t.transpose_last2(v[0])?; probe(t, y, 9) }, &[&[2, 3, 4]], 18)),
        ("softmax", check(|t, v| { let y = t.softmax(v[0]); probe(t, y, 9) }, &[&[3, 5]], 19)),
        ("concat", check(|t, v| { let y = t.concat(&[v[0], v[1]], 1)?; probe(t, y, 9) }, &[&[2, 3, 2], &[2, 1, 2]], 20)),
        ("narrow", check(|t, v| { let y = t.narrow(v[0], 1, 1, 2)?; probe(t, y, 9) }, &[&[2, 4, 3]], 21)),
        ("repeat", check(|t, v| { let y = t.repeat_leading(v[0], 3); probe(t, y, 9) }, &[&[2, 3]], 22)),
        ("reshape", check(|t, v| { let y = t.reshape(v[0], &[6, 2])?; probe(t, y, 9) }, &[&[3, 4]], 23)),
        ("scale", check(|t, v| { let y = t.scale(v[0], -2.5); probe(t, y, 9) }, &[&[3, 4]], 24)),
    ];
    for (name, err) in cases {
        assert!(err <= tol, "{name}: rel err {err}");
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    let x = Tensor::new(vec![4], vec![-1.0, -0.3, 0.4, 2.0]).unwrap();
    let err = grad_check(|t, v| { let y = t.relu(v[0]); probe(t, y, 3) }, &[x], 1e-6).unwrap();
    assert!(err.max_rel_error <= 1e-6);
}

#[test]
fn shared_leaf_accumulates_gradient() {
    // y = sum(x * x + x), the leaf feeds three uses.
    let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let sq = tape.mul(v, v).unwrap();
    let y = tape.add(sq, v).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap(), &[2.0, -1.0, 5.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_agrees_with_reference(seed in any::<u64>(), n in 1usize..3, ci in 1usize..4, co in 1usize..4, h in 1usize..7, w in 1usize..7, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[n, ci, h, w]);
        let kk = random_tensor(&mut rng, &[co, ci, k, k]);
        let b = random_tensor(&mut rng, &[co]);
        prop_assert!(conv_eval(&x, &kk, &b).max_abs_diff(&naive_conv(&x, &kk, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_agrees_with_reference(seed in any::<u64>(), m in 1usize..7, k in 1usize..7, n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, n]);
        let fast = Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), 1, m, k, n)).unwrap();
        prop_assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let s = softmax_of(&values);
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let r = softmax_reference(&values);
        for (a, b) in s.iter().zip(&r) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
