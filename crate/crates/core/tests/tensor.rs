mod common;

use proptest::prelude::*;
use vitscale::optim::{bf16_round, is_bf16};
use vitscale::tensor::{Tape, Tensor};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                c[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    c
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..7, 1usize..7, 1usize..7)
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop((m, k, n) in dims(), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a = common::random_tensor(&[m, k], &mut rng);
        let b = common::random_tensor(&[k, n], &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let want = naive_matmul(a.data(), b.data(), m, k, n);
        for (x, y) in tape.value(c).data().iter().zip(&want) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bmm_is_a_loop_of_matmuls(batch in 1usize..4, (m, k, n) in dims(), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a = common::random_tensor(&[batch, m, k], &mut rng);
        let b = common::random_tensor(&[batch, k, n], &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.bmm(va, vb).unwrap();
        let got = tape.value(c).data();
        for i in 0..batch {
            let want = naive_matmul(&a.data()[i * m * k..][..m * k], &b.data()[i * k * n..][..k * n], m, k, n);
            for (x, y) in got[i * m * n..][..m * n].iter().zip(&want) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, shift in -500.0f64..500.0, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let x = common::random_tensor(&[rows, cols], &mut rng).map(|v| 20.0 * v + shift);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, 1).unwrap();
        for r in tape.value(s).data().chunks(cols) {
            prop_assert!(r.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises(rows in 1usize..5, cols in 2usize..12, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let x = common::random_tensor(&[rows, cols], &mut rng).map(|v| 3.0 * v + 1.0);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let g = tape.constant(Tensor::full([cols], 1.0));
        let b = tape.constant(Tensor::zeros([cols]));
        let y = tape.layer_norm(v, g, b, 1e-12).unwrap();
        for r in tape.value(y).data().chunks(cols) {
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-6 || var < 1e-6);
        }
    }

    #[test]
    fn bf16_rounding_is_idempotent(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        let r = bf16_round(x);
        prop_assert!(is_bf16(r));
        prop_assert_eq!(bf16_round(r).to_bits(), r.to_bits());
    }

    #[test]
    fn bf16_rounding_is_monotone(a in -1e30f64..1e30, b in -1e30f64..1e30) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(bf16_round(lo) <= bf16_round(hi));
    }

    #[test]
    fn bf16_relative_error_is_half_an_ulp(x in prop_oneof![1e-30f64..1e30, -1e30f64..-1e-30]) {
        let r = bf16_round(x);
        prop_assert!(((r - x) / x).abs() <= 2f64.powi(-8));
    }
}
