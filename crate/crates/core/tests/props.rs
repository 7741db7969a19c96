//! Property tests over random inputs.

use proptest::collection::vec as pvec;
use proptest::prelude::*;
use rotaquant_core::hadamard::{fwht, randomized_hadamard};
use rotaquant_core::linalg::{frobenius_norm, matmul, Matrix};
use rotaquant_core::quant::{rtn_quantize_activation, rtn_quantize_weight};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// FWHT preserves the 2-norm for any power-of-two length.
    #[test]
    fn fwht_is_an_isometry(k in 1usize..8, xs in pvec(-100.0f64..100.0, 128)) {
        let n = 1usize << k;
        let x = &xs[..n];
        let y = fwht(x, true).unwrap();
        let n2 = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        prop_assert!((n2(x) - n2(&y)).abs() <= 1e-9 * n2(x).max(1.0));
    }

    /// Randomized Hadamard matrices are orthogonal for any seed.
    #[test]
    fn randomized_hadamard_orthogonal(seed in any::<u64>()) {
        let q = randomized_hadamard(32, seed).unwrap().materialize().unwrap();
        let gram = matmul(&q.transpose(), &q).unwrap();
        let eye = Matrix::identity(32);
        prop_assert!(frobenius_norm(&gram.sub(&eye).unwrap()) < 1e-10);
    }

    /// RTN weight round trip stays within half a quantization step per entry.
    #[test]
    fn rtn_weight_error_bounded(vals in pvec(-10.0f64..10.0, 32), bits in prop::sample::select(vec![4u32, 6, 8, 16])) {
        let w = Matrix::from_vec(8, 4, vals).unwrap();
        let deq = rtn_quantize_weight(&w, bits, 1.0).unwrap();
        let scales = deq.scales.clone();
        let back = deq.dequantize();
        for j in 0..4 {
            for i in 0..8 {
                let err = (back.get(i, j) - w.get(i, j)).abs();
                prop_assert!(err <= 0.5 * scales[j] + 1e-12);
            }
        }
    }

    /// RTN activation round trip stays within half a step per row.
    #[test]
    fn rtn_activation_error_bounded(vals in pvec(-10.0f64..10.0, 32), bits in prop::sample::select(vec![4u32, 6, 8, 16])) {
        let x = Matrix::from_vec(4, 8, vals).unwrap();
        let deq = rtn_quantize_activation(&x, bits).unwrap();
        let scales = deq.scales.clone();
        let back = deq.dequantize();
        for i in 0..4 {
            for j in 0..8 {
                let err = (back.get(i, j) - x.get(i, j)).abs();
                prop_assert!(err <= 0.5 * scales[i] + 1e-12);
            }
        }
    }
}
