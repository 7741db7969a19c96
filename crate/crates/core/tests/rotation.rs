//! Invariance of the rotation rewrites: the rewritten checkpoint must be the
//! same function of tokens as the original, to float tolerance.

use rotaquant_core::hadamard::randomized_hadamard;
use rotaquant_core::linalg::matmul;
use rotaquant_core::model::{self, init_model, ModelConfig};
use rotaquant_core::rng::SeededRng;
use rotaquant_core::rotation::{
    apply_bbr, apply_ibr_attn, apply_ibr_ffn, apply_rotation_plan, fuse_norms, r3_seed,
    verify_invariance, RotationPlan,
};

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 32,
        vocab: 32,
        seq_len: 16,
        seed: 5,
        ..ModelConfig::default()
    }
}

/// Norm scales are ones at init; invariance tests need them non-trivial.
fn model_with_scales(cfg: &ModelConfig) -> model::ModelCheckpoint {
    let mut m = init_model(cfg).unwrap();
    let mut rng = SeededRng::new(1234);
    for name in model::param_names(cfg) {
        if name.ends_with("norm") {
            for v in m.param_mut(&name).unwrap() {
                *v = 0.5 + rng.uniform();
            }
        }
    }
    m
}

#[test]
fn norm_fusion_preserves_logits() {
    let cfg = small_config();
    let m = model_with_scales(&cfg);
    let fused = fuse_norms(m.clone()).unwrap();
    assert!(fused.norm_fused);
    for layer in &fused.layers {
        assert!(layer.attn_norm.iter().all(|&v| v == 1.0));
        assert!(layer.ffn_norm.iter().all(|&v| v == 1.0));
    }
    let rep = verify_invariance(&m, &fused, 16, 1e-10).unwrap();
    assert!(rep.pass, "fusion deviation {}", rep.max_deviation);
    // Fusing twice is an error.
    assert!(fuse_norms(fused).is_err());
}

#[test]
fn bbr_preserves_logits() {
    let cfg = small_config();
    let m = model_with_scales(&cfg);
    let fused = fuse_norms(m.clone()).unwrap();
    let q = randomized_hadamard(cfg.d_model, 11).unwrap();
    let rotated = apply_bbr(fused, &q).unwrap();
    let rep = verify_invariance(&m, &rotated, 16, 1e-8).unwrap();
    assert!(rep.pass, "bbr deviation {}", rep.max_deviation);
}

#[test]
fn bbr_requires_fused_norms() {
    let cfg = small_config();
    let m = model_with_scales(&cfg);
    let q = randomized_hadamard(cfg.d_model, 11).unwrap();
    assert!(apply_bbr(m, &q).is_err());
}

#[test]
fn ibr_ffn_preserves_logits() {
    let cfg = small_config();
    let m = model_with_scales(&cfg);
    let rewritten = apply_ibr_ffn(m.clone()).unwrap();
    let rep = verify_invariance(&m, &rewritten, 16, 1e-8).unwrap();
    assert!(rep.pass, "ibr-ffn deviation {}", rep.max_deviation);
    assert!(apply_ibr_ffn(rewritten).is_err());
}

#[test]
fn ibr_attn_preserves_logits_and_probs() {
    let cfg = small_config();
    let m = model_with_scales(&cfg);
    let q3 = randomized_hadamard(cfg.head_dim(), r3_seed(5)).unwrap();
    let rewritten = apply_ibr_attn(m.clone(), &q3).unwrap();
    let rep = verify_invariance(&m, &rewritten, 16, 1e-8).unwrap();
    assert!(rep.pass, "ibr-attn deviation {}", rep.max_deviation);
    // Q and K are untouched, so attention probabilities are bitwise equal;
    // only the V/O basis changes.
    assert_eq!(m.layers[0].wq, rewritten.layers[0].wq);
    assert_eq!(m.layers[0].wk, rewritten.layers[0].wk);
    assert_ne!(m.layers[0].wv, rewritten.layers[0].wv);
}

#[test]
fn full_plan_preserves_logits() {
    let cfg = small_config();
    let m = model_with_scales(&cfg);
    for plan in [
        RotationPlan::default(),
        RotationPlan { r1: true, r2: true, r3: true, seed: 3 },
        RotationPlan { r1: true, r2: false, r3: false, seed: 9 },
    ] {
        let rotated = apply_rotation_plan(m.clone(), &plan).unwrap();
        let rep = verify_invariance(&m, &rotated, 64, 1e-6).unwrap();
        assert!(rep.pass, "plan {plan:?} deviation {}", rep.max_deviation);
        let set = rotated.rotated.as_ref().unwrap();
        assert_eq!(set.r1.is_some(), plan.r1);
        assert_eq!(set.r2_enabled, plan.r2);
        assert_eq!(set.r3.is_some(), plan.r3);
    }
}

#[test]
fn rotation_is_deterministic_in_seed() {
    let cfg = small_config();
    let m = model_with_scales(&cfg);
    let plan = RotationPlan { r1: true, r2: true, r3: true, seed: 21 };
    let a = apply_rotation_plan(m.clone(), &plan).unwrap();
    let b = apply_rotation_plan(m.clone(), &plan).unwrap();
    assert_eq!(a.layers[0].wq, b.layers[0].wq);
    assert_eq!(a.embedding, b.embedding);
    let other = apply_rotation_plan(m, &RotationPlan { seed: 22, ..plan }).unwrap();
    assert_ne!(a.embedding, other.embedding);
}

/// Using a different R1 per layer breaks the residual stream: the stream
/// arrives in basis Q_a but layer 1 expects basis Q_b.
#[test]
fn per_layer_r1_breaks_invariance() {
    let cfg = small_config();
    let m = model_with_scales(&cfg);
    let fused = fuse_norms(m.clone()).unwrap();
    let qa = randomized_hadamard(cfg.d_model, 11).unwrap();
    let mut broken = apply_bbr(fused, &qa).unwrap();
    // Re-express layer 1's stream-consuming weights as if its own rotation
    // were Q_b: W <- Qa Qb^T W. That is what a per-layer R1 would produce.
    let qb = randomized_hadamard(cfg.d_model, 12).unwrap();
    let mix = matmul(&qa.materialize().unwrap(), &qb.materialize().unwrap().transpose()).unwrap();
    for name in ["layers.1.wq", "layers.1.wk", "layers.1.wv", "layers.1.w_up", "layers.1.w_gate"] {
        let (r, c) = broken.param_shape(name).unwrap();
        let w = rotaquant_core::linalg::Matrix::from_vec(
            r,
            c,
            broken.param(name).unwrap().to_vec(),
        )
        .unwrap();
        let rewritten = matmul(&mix, &w).unwrap();
        broken.param_mut(name).unwrap().copy_from_slice(rewritten.data());
    }
    let rep = verify_invariance(&m, &broken, 16, 1e-2).unwrap();
    assert!(!rep.pass, "per-layer R1 unexpectedly invariant: {}", rep.max_deviation);
    assert!(rep.max_deviation > 1e-2);
}

#[test]
fn invariance_checker_flags_perturbation() {
    let cfg = small_config();
    let m = model_with_scales(&cfg);
    let mut tweaked = m.clone();
    tweaked.param_mut("layers.0.wq").unwrap()[0] += 0.05;
    let rep = verify_invariance(&m, &tweaked, 8, 1e-6).unwrap();
    assert!(!rep.pass);
    let self_rep = verify_invariance(&m, &m, 8, 0.0).unwrap();
    assert!(self_rep.pass);
    assert_eq!(self_rep.max_deviation, 0.0);
}
