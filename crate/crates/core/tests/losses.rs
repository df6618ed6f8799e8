use csdasa::losses::{
    cross_entropy, cross_entropy_var, mmd_squared, mmd_squared_var, mmd_transfer_loss,
    mmd_transfer_loss_var, total_loss_var, AdaptationBatch, KernelConfig,
};
use csdasa::numerics::{grad_check, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{oracle_mmd, random};

#[test]
fn mmd_matches_double_loop_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.gen_range(1..=16);
        let m = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=64);
        let sigma = rng.gen_range(0.5..4.0);
        let s = random(&mut rng, &[n, d], 1.0);
        let t = random(&mut rng, &[m, d], 1.0);
        let kc = KernelConfig::fixed(sigma);
        let got = mmd_squared(&s, &t, &kc).unwrap();
        assert!((got - oracle_mmd(&s, &t, sigma)).abs() <= 1e-12);
        assert_eq!(got, mmd_squared(&t, &s, &kc).unwrap());
        assert!(mmd_squared(&s, &s, &kc).unwrap().abs() <= 1e-12);
    }
}

#[test]
fn mmd_eight_by_ten_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random(&mut rng, &[8, 10], 2.0);
    let t = random(&mut rng, &[8, 10], 2.0);
    let got = mmd_squared(&s, &t, &KernelConfig::fixed(1.7)).unwrap();
    assert!((got - oracle_mmd(&s, &t, 1.7)).abs() <= 1e-12);
}

#[test]
fn median_bandwidth_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random(&mut rng, &[9, 12], 1.0);
    let t = random(&mut rng, &[7, 12], 1.0);
    let kc = KernelConfig::default();
    let base = mmd_squared(&s, &t, &kc).unwrap();
    for factor in [0.01, 3.0, 250.0] {
        let scaled = mmd_squared(&s.map(|v| v * factor), &t.map(|v| v * factor), &kc).unwrap();
        assert!((scaled - base).abs() <= 1e-9, "factor {factor}: {scaled} vs {base}");
    }
}

#[test]
fn mmd_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = random(&mut rng, &[4, 3], 1.0);
    let t = random(&mut rng, &[5, 3], 1.0);
    let kc = KernelConfig::fixed(1.3);
    let report = grad_check(|tape, v| mmd_squared_var(tape, v[0], v[1], &kc), &[s, t], 1e-5).unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn transfer_loss_sums_layer_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = (random(&mut rng, &[6, 2, 3, 3], 1.0), random(&mut rng, &[6, 2, 3, 3], 1.0));
    let b = (random(&mut rng, &[6, 4], 1.0), random(&mut rng, &[6, 4], 1.0));
    let kc = KernelConfig::default();
    let separate = mmd_squared(&a.0, &a.1, &kc).unwrap() + mmd_squared(&b.0, &b.1, &kc).unwrap();
    let joint = mmd_transfer_loss(&AdaptationBatch { layers: vec![a.clone(), b.clone()] }, &kc).unwrap();
    assert!((joint - separate).abs() <= 1e-12);

    let mut tape = Tape::new();
    let pairs: Vec<_> = [a, b]
        .into_iter()
        .map(|(s, t)| (tape.constant(s), tape.constant(t)))
        .collect();
    let v = mmd_transfer_loss_var(&mut tape, &pairs, &kc).unwrap();
    assert!((tape.value(v).item().unwrap() - separate).abs() <= 1e-12);
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits = random(&mut rng, &[10, 4], 4.0);
    let labels: Vec<usize> = (0..10).map(|_| rng.gen_range(0..4)).collect();
    let mut expected = 0.0;
    for (row, &y) in logits.data().chunks(4).zip(&labels) {
        let denom: f64 = row.iter().map(|z| z.exp()).sum();
        expected -= (row[y].exp() / denom).ln();
    }
    expected /= 10.0;
    assert!((cross_entropy(&logits, &labels).unwrap() - expected).abs() <= 1e-10);

    let report = grad_check(|tape, v| cross_entropy_var(tape, v[0], &labels), &[logits], 1e-5).unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn total_gradient_is_linear_in_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let w = random(&mut rng, &[3, 4], 0.8);
    let xs = random(&mut rng, &[5, 3], 1.0);
    let xt = random(&mut rng, &[6, 3], 1.0);
    let labels = [0, 3, 1, 2, 1];
    let kc = KernelConfig::default();
    let gamma = 0.7;

    // 0: ce only, 1: mmd only, 2: ce + γ·mmd
    let grad_of = |which: u8| {
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let s = tape.constant(xs.clone());
        let t = tape.constant(xt.clone());
        let fs = tape.matmul(s, wv).unwrap();
        let ft = tape.matmul(t, wv).unwrap();
        let ce = cross_entropy_var(&mut tape, fs, &labels).unwrap();
        let mmd = mmd_squared_var(&mut tape, fs, ft, &kc).unwrap();
        let loss = match which {
            0 => ce,
            1 => mmd,
            _ => total_loss_var(&mut tape, ce, mmd, gamma).unwrap(),
        };
        tape.backward(loss).unwrap().get(wv).unwrap().to_vec()
    };
    let (g_ce, g_mmd, g_total) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..g_total.len() {
        assert!((g_total[i] - (g_ce[i] + gamma * g_mmd[i])).abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn mmd_is_nonnegative_and_symmetric(
        n in 1usize..8, m in 1usize..8, d in 1usize..6, seed in any::<u64>(), median in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random(&mut rng, &[n, d], 3.0);
        let t = random(&mut rng, &[m, d], 3.0);
        let kc = if median { KernelConfig::default() } else { KernelConfig::fixed(1.1) };
        let st = mmd_squared(&s, &t, &kc).unwrap();
        prop_assert!(st >= -1e-12);
        prop_assert_eq!(st, mmd_squared(&t, &s, &kc).unwrap());
    }
}
