//! Forward/backward correctness of the toy transformer.

use rotaquant_core::linalg::Matrix;
use rotaquant_core::model::{
    self, init_model, loss_and_grads, param_names, ModelConfig,
};
use rotaquant_core::rng::SeededRng;

fn micro_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 16,
        vocab: 16,
        seq_len: 8,
        seed: 7,
        ..ModelConfig::default()
    }
}

fn random_tokens(cfg: &ModelConfig, seed: u64, len: usize) -> Vec<u32> {
    let mut rng = SeededRng::new(seed);
    (0..len).map(|_| rng.below(cfg.vocab) as u32).collect()
}

#[test]
fn init_is_deterministic() {
    let cfg = micro_config();
    let a = init_model(&cfg).unwrap();
    let b = init_model(&cfg).unwrap();
    assert_eq!(a.embedding, b.embedding);
    assert_eq!(a.layers[1].wv, b.layers[1].wv);
    let mut cfg2 = cfg.clone();
    cfg2.seed = 8;
    let c = init_model(&cfg2).unwrap();
    assert_ne!(a.embedding, c.embedding);
}

#[test]
fn param_count_matches_storage() {
    let cfg = ModelConfig::default();
    let m = init_model(&cfg).unwrap();
    let mut total = 0usize;
    for name in param_names(&cfg) {
        total += m.param(&name).unwrap().len();
    }
    assert_eq!(total, cfg.param_count());
}

#[test]
fn forward_is_deterministic_and_causal() {
    let cfg = micro_config();
    let m = init_model(&cfg).unwrap();
    let tokens = random_tokens(&cfg, 1, 8);
    let a = model::forward(&m, &tokens, &[], None).unwrap();
    let b = model::forward(&m, &tokens, &[], None).unwrap();
    assert_eq!(a.logits, b.logits);

    // Changing a later token must leave earlier rows of the logits intact.
    let mut perturbed = tokens.clone();
    perturbed[6] = (perturbed[6] + 1) % cfg.vocab as u32;
    let c = model::forward(&m, &perturbed, &[], None).unwrap();
    for t in 0..6 {
        for j in 0..cfg.vocab {
            assert_eq!(a.logits.get(t, j), c.logits.get(t, j), "leak at t={t}");
        }
    }
    let mut later_changed = false;
    for j in 0..cfg.vocab {
        if a.logits.get(6, j) != c.logits.get(6, j) {
            later_changed = true;
        }
    }
    assert!(later_changed);
}

#[test]
fn zero_head_gives_uniform_loss() {
    let cfg = micro_config();
    let mut m = init_model(&cfg).unwrap();
    for w in m.param_mut("lm_head").unwrap() {
        *w = 0.0;
    }
    let tokens = random_tokens(&cfg, 2, 8);
    let loss = model::sequence_loss(&m, &tokens, None).unwrap();
    assert!((loss - (cfg.vocab as f64).ln()).abs() < 1e-12);
}

#[test]
fn capture_points_present_with_expected_shapes() {
    let cfg = micro_config();
    let m = init_model(&cfg).unwrap();
    let points = model::all_capture_points(&cfg);
    let tokens = random_tokens(&cfg, 3, 8);
    let trace = model::forward(&m, &tokens, &points, None).unwrap();
    for p in &points {
        let mat = trace.captures.get(p).unwrap_or_else(|| panic!("missing {p}"));
        assert_eq!(mat.rows(), tokens.len());
        let want_cols = if p.ends_with("down_in") { cfg.d_ffn } else { cfg.d_model };
        assert_eq!(mat.cols(), want_cols, "{p}");
        assert!(mat.is_finite());
    }
}

/// Full-parameter gradient check against central finite differences.
#[test]
fn gradcheck_all_parameters() {
    let cfg = micro_config();
    let m = init_model(&cfg).unwrap();
    let tokens = random_tokens(&cfg, 4, 8);
    let trainables = param_names(&cfg);
    let (_, grads) = loss_and_grads(&m, &tokens, &trainables).unwrap();

    let eps = 1e-4;
    let mut probe_rng = SeededRng::new(99);
    let mut checked = 0usize;
    for name in &trainables {
        let g = grads.get(name).unwrap();
        let n = g.data().len();
        // Sample a handful of coordinates per tensor; the loss is smooth so
        // central differences are accurate to O(eps^2).
        let probes: Vec<usize> = (0..6.min(n)).map(|_| probe_rng.below(n)).collect();
        for &i in &probes {
            let mut plus = m.clone();
            plus.param_mut(name).unwrap()[i] += eps;
            let lp = model::sequence_loss(&plus, &tokens, None).unwrap();
            let mut minus = m.clone();
            minus.param_mut(name).unwrap()[i] -= eps;
            let lm = model::sequence_loss(&minus, &tokens, None).unwrap();
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = g.data()[i];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            let rel = (numeric - analytic).abs() / denom;
            assert!(
                rel < 1e-4,
                "{name}[{i}]: analytic {analytic:.3e} vs numeric {numeric:.3e} (rel {rel:.3e})"
            );
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn planted_outliers_raise_channel_magnitude() {
    let mut cfg = micro_config();
    let base = init_model(&cfg).unwrap();
    cfg.outlier_channels = 2;
    cfg.outlier_scale = 100.0;
    let planted = init_model(&cfg).unwrap();
    let col_max = |m: &Matrix, j: usize| {
        (0..m.rows()).map(|i| m.get(i, j).abs()).fold(0.0f64, f64::max)
    };
    let mut scaled = 0usize;
    let mut untouched = 0usize;
    for j in 0..cfg.d_model {
        let before = col_max(&base.embedding, j);
        let after = col_max(&planted.embedding, j);
        if after > 10.0 * before {
            scaled += 1;
        } else if (after - before).abs() < 1e-12 {
            untouched += 1;
        }
    }
    assert_eq!(scaled, 2);
    assert_eq!(untouched, cfg.d_model - 2);
}

#[test]
fn rejects_bad_configs_and_inputs() {
    let mut cfg = micro_config();
    cfg.d_model = 12;
    assert!(init_model(&cfg).is_err());
    let cfg = micro_config();
    let m = init_model(&cfg).unwrap();
    assert!(model::forward(&m, &[], &[], None).is_err());
    assert!(model::forward(&m, &[999], &[], None).is_err());
    let long: Vec<u32> = vec![0; cfg.seq_len + 1];
    assert!(model::forward(&m, &long, &[], None).is_err());
}
