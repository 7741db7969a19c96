//! Kurtosis oracle checks, SVD approximation-error experiment, and the
//! synthetic corpus.

use rotaquant_core::analysis::{
    kurtosis, mean_activation_kurtosis, svd_approx_experiment, tail_energy, WeightSide,
    KURTOSIS_EPS,
};
use rotaquant_core::corpus::{fixed_windows, sample_windows, split, synthetic_corpus};
use rotaquant_core::hadamard::randomized_hadamard;
use rotaquant_core::linalg::{frobenius_norm, svd, Matrix};
use rotaquant_core::model::{init_model, ModelConfig};
use rotaquant_core::rng::SeededRng;
use rotaquant_core::rotation::{apply_rotation_plan, RotationPlan};

#[test]
fn kurtosis_of_gaussian_is_near_three() {
    let mut rng = SeededRng::new(6);
    let xs: Vec<f64> = (0..200_000).map(|_| rng.normal()).collect();
    let k = kurtosis(&xs, KURTOSIS_EPS, true).unwrap();
    assert!((k - 3.0).abs() < 0.05, "gaussian kurtosis {k}");
}

#[test]
fn kurtosis_known_values() {
    // Symmetric two-point mass at ±1 has kurtosis exactly 1.
    let xs = [1.0, -1.0, 1.0, -1.0];
    let k = kurtosis(&xs, 0.0, true).unwrap();
    assert!((k - 1.0).abs() < 1e-12);

    // A spike among zeros: kurtosis approaches n as the spike dominates.
    let mut spiky = vec![0.0; 99];
    spiky.push(10.0);
    let k = kurtosis(&spiky, KURTOSIS_EPS, true).unwrap();
    assert!(k > 50.0, "spike kurtosis {k}");

    // Constant input is eps-guarded, not a division by zero.
    let k = kurtosis(&[2.0; 16], KURTOSIS_EPS, true).unwrap();
    assert!(k.is_finite());
    assert!(kurtosis(&[], KURTOSIS_EPS, true).is_err());
}

#[test]
fn rotation_lowers_activation_kurtosis_on_planted_outliers() {
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 64,
        vocab: 32,
        seq_len: 16,
        seed: 2,
        outlier_channels: 3,
        outlier_scale: 100.0,
    };
    let m = init_model(&cfg).unwrap();
    let rotated = apply_rotation_plan(m.clone(), &RotationPlan::default()).unwrap();
    let corpus = synthetic_corpus(0, 1024, cfg.vocab).unwrap();
    let seqs = fixed_windows(&corpus, cfg.seq_len, 4).unwrap();
    let before = mean_activation_kurtosis(&m, &seqs).unwrap();
    let after = mean_activation_kurtosis(&rotated, &seqs).unwrap();
    assert!(
        after < before / 2.0,
        "kurtosis before {before:.2} after {after:.2}"
    );
}

#[test]
fn svd_experiment_matches_tail_energy_and_is_monotone() {
    let mut rng = SeededRng::new(77);
    let d = 24;
    let w0 = Matrix::from_vec(d, d, (0..d * d).map(|_| rng.normal()).collect()).unwrap();
    let delta = Matrix::from_vec(d, d, (0..d * d).map(|_| rng.normal() * 0.1).collect()).unwrap();
    let w_ft = w0.add(&delta).unwrap();
    let q = randomized_hadamard(d, 5).unwrap();
    let ranks = [1, 2, 4, 8, 16, 24];
    let rows = svd_approx_experiment(&w0, &w_ft, &q, &ranks, WeightSide::Left).unwrap();
    assert_eq!(rows.len(), 2 * ranks.len());

    for scheme in ["lar", "lbr"] {
        let errs: Vec<f64> = rows
            .iter()
            .filter(|r| r.scheme == scheme)
            .map(|r| r.error)
            .collect();
        assert_eq!(errs.len(), ranks.len());
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{scheme} not monotone: {errs:?}");
        }
        // Full rank reproduces the target exactly.
        assert!(errs[ranks.len() - 1] < 1e-9);
    }

    // Eckart-Young: the rank-r error equals the tail spectrum energy of the
    // residual the scheme is approximating.
    let qm = q.materialize().unwrap();
    let o_lar = w_ft.sub(&WeightSide::Left.rewrite(&w0, &qm).unwrap()).unwrap();
    let (_, s, _) = svd(&o_lar).unwrap();
    for (i, &rank) in ranks.iter().enumerate() {
        let expect = tail_energy(&s, rank);
        let got = rows
            .iter()
            .filter(|r| r.scheme == "lar")
            .nth(i)
            .unwrap()
            .error;
        assert!(
            (got - expect).abs() <= 1e-8 * expect.max(1.0),
            "rank {rank}: {got} vs {expect}"
        );
    }
}

#[test]
fn weight_side_rewrites_invert() {
    let mut rng = SeededRng::new(8);
    let w = Matrix::from_vec(16, 16, (0..256).map(|_| rng.normal()).collect()).unwrap();
    let q = randomized_hadamard(16, 9).unwrap().materialize().unwrap();
    for side in [WeightSide::Left, WeightSide::Right] {
        let fwd = side.rewrite(&w, &q).unwrap();
        let back = side.inverse_rewrite(&fwd, &q).unwrap();
        let err = frobenius_norm(&back.sub(&w).unwrap());
        assert!(err < 1e-10, "{side:?} inverse error {err}");
    }
}

#[test]
fn corpus_is_deterministic_and_in_vocab() {
    let a = synthetic_corpus(9, 10_000, 128).unwrap();
    let b = synthetic_corpus(9, 10_000, 128).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 10_000);
    assert!(a.iter().all(|&t| t < 128));
    let c = synthetic_corpus(10, 10_000, 128).unwrap();
    assert_ne!(a, c);

    // Markov structure: conditioned on a two-token context, the successor
    // set is small even though the marginal histogram is nearly flat.
    let mut ctx_succ: std::collections::BTreeMap<(u32, u32), std::collections::BTreeSet<u32>> =
        Default::default();
    for w in a.windows(3) {
        ctx_succ.entry((w[0], w[1])).or_default().insert(w[2]);
    }
    let (_, succ) = ctx_succ.iter().max_by_key(|(_, s)| s.len()).unwrap();
    assert!(succ.len() <= 4, "context has {} successors", succ.len());
}

#[test]
fn corpus_windows_and_split() {
    let corpus = synthetic_corpus(0, 1000, 64).unwrap();
    let (train, holdout) = split(&corpus, 0.1);
    assert_eq!(train.len(), 900);
    assert_eq!(holdout.len(), 100);

    let fixed = fixed_windows(&corpus, 16, 5).unwrap();
    assert_eq!(fixed.len(), 5);
    assert!(fixed.iter().all(|w| w.len() == 16));
    assert_eq!(fixed, fixed_windows(&corpus, 16, 5).unwrap());

    let mut rng = SeededRng::new(3);
    let sampled = sample_windows(&corpus, 16, 5, &mut rng).unwrap();
    assert_eq!(sampled.len(), 5);
    assert!(sampled.iter().all(|w| w.len() == 16));
}
