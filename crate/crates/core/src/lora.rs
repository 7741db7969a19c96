//! Low-rank adapters, the rotation-aware placement schemes (LAR/LBR), the
//! Adam fine-tuning loop, adapter merging, and the end-to-end
//! train→merge→quantize pipeline recipes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::analysis;
use crate::corpus;
use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::model::{self, init_model, loss_and_grads, param_names, ModelCheckpoint};
use crate::quant::{self, QuantSpec, WeightQuantizer};
use crate::rng::SeededRng;
use crate::rotation::{apply_rotation_plan, RotationPlan};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const ADAPTER_INIT_STD: f64 = 0.02;

/// Projection kinds an adapter can bind to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ProjKind {
    Wq,
    Wk,
    Wv,
    Wo,
    WUp,
    WGate,
    WDown,
}

impl ProjKind {
    pub fn field(&self) -> &'static str {
        match self {
            ProjKind::Wq => "wq",
            ProjKind::Wk => "wk",
            ProjKind::Wv => "wv",
            ProjKind::Wo => "wo",
            ProjKind::WUp => "w_up",
            ProjKind::WGate => "w_gate",
            ProjKind::WDown => "w_down",
        }
    }

    pub fn param_name(&self, layer: usize) -> String {
        format!("layers.{layer}.{}", self.field())
    }

    /// Side classification used by the BBR rewrite and the approximation
    /// experiment.
    pub fn side(&self) -> analysis::WeightSide {
        match self {
            ProjKind::Wo | ProjKind::WDown => analysis::WeightSide::Right,
            _ => analysis::WeightSide::Left,
        }
    }
}

/// One low-rank pair bound to a layer projection: ΔW = scaling · A · B.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub layer: usize,
    pub proj: ProjKind,
    pub rank: usize,
    pub a: Matrix,
    pub b: Matrix,
    pub scaling: f64,
}

/// Fine-tuning scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scheme {
    PlainLora,
    RoloraLar,
    RoloraLbr,
    Full,
}

/// Fine-tuning configuration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FinetuneConfig {
    pub scheme: Scheme,
    pub targets: Vec<ProjKind>,
    pub rank: usize,
    pub steps: usize,
    pub batch: usize,
    pub learn_rate: f64,
    pub seed: u64,
    pub rotation: Option<RotationPlan>,
    /// When set, frozen base weights are fake-quantized in the training
    /// forward pass (the QRoLoRA setting). Adapters stay high-precision.
    pub base_quant: Option<QuantSpec>,
    /// Log mean activation kurtosis every this many steps (0 = never).
    pub kurtosis_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            scheme: Scheme::PlainLora,
            targets: vec![ProjKind::Wq, ProjKind::Wv],
            rank: 16,
            steps: 200,
            batch: 4,
            learn_rate: 1e-4,
            seed: 0,
            rotation: None,
            base_quant: None,
            kurtosis_every: 0,
        }
    }
}

/// Attached adapters plus optimizer state.
pub struct TrainState {
    pub model: ModelCheckpoint,
    pub adapters: Vec<LoraAdapter>,
    pub cfg: FinetuneConfig,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step: usize,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub kurtosis: Option<f64>,
}

/// Attach fresh adapters: A seeded Gaussian, B zero, so the adapted forward
/// equals the base forward exactly.
pub fn attach_adapters(m: ModelCheckpoint, cfg: FinetuneConfig) -> Result<TrainState> {
    let rotated = m.rotated.as_ref().map_or(false, |r| r.r1.is_some());
    match cfg.scheme {
        Scheme::RoloraLar => {
            if !rotated {
                return Err(Error::State("rolora_lar requires an already-rotated model".into()));
            }
            if cfg.rotation.is_none() {
                return Err(Error::Config("rolora_lar requires a rotation plan".into()));
            }
        }
        Scheme::RoloraLbr => {
            if rotated {
                return Err(Error::State(
                    "rolora_lbr trains the unrotated model; rotation applies at merge".into(),
                ));
            }
            if cfg.rotation.is_none() {
                return Err(Error::Config("rolora_lbr requires a rotation plan".into()));
            }
        }
        Scheme::PlainLora | Scheme::Full => {
            if cfg.rotation.is_some() {
                return Err(Error::Config(format!(
                    "{:?} requires rotation to be absent",
                    cfg.scheme
                )));
            }
            if rotated {
                return Err(Error::State("plain schemes require an unrotated model".into()));
            }
        }
    }
    if let Some(q) = &cfg.base_quant {
        q.validate()?;
        if q.weight_quantizer == WeightQuantizer::Gptq {
            return Err(Error::Config("base_quant during training supports RTN only".into()));
        }
    }

    let mut adapters = Vec::new();
    if cfg.scheme != Scheme::Full {
        if cfg.targets.is_empty() {
            return Err(Error::Config("no target projections".into()));
        }
        let mut rng = SeededRng::derive(cfg.seed, 0x10A);
        for layer in 0..m.config.n_layers {
            for &proj in &cfg.targets {
                let (d_in, d_out) = m.param_shape(&proj.param_name(layer))?;
                if cfg.rank == 0 || cfg.rank > d_in.min(d_out) {
                    return Err(Error::Config(format!(
                        "rank {} out of range for {}x{} target",
                        cfg.rank, d_in, d_out
                    )));
                }
                let a_data = (0..d_in * cfg.rank).map(|_| rng.normal() * ADAPTER_INIT_STD).collect();
                adapters.push(LoraAdapter {
                    layer,
                    proj,
                    rank: cfg.rank,
                    a: Matrix::from_vec(d_in, cfg.rank, a_data)?,
                    b: Matrix::zeros(cfg.rank, d_out),
                    scaling: 1.0,
                });
            }
        }
    }
    Ok(TrainState { model: m, adapters, cfg, moments: BTreeMap::new(), step: 0 })
}

impl TrainState {
    /// Materialize the effective model the training forward pass sees:
    /// optionally fake-quantized frozen base weights, plus ΔW per adapter.
    pub fn effective_model(&self) -> Result<ModelCheckpoint> {
        let mut m = self.model.clone();
        if let Some(spec) = &self.cfg.base_quant {
            m = quant::fake_quant_weights(&m, spec, &[])?.model;
        }
        for ad in &self.adapters {
            let delta = matmul(&ad.a, &ad.b)?.scale(ad.scaling);
            let name = ad.proj.param_name(ad.layer);
            let slot = m.param_mut(&name)?;
            for (w, d) in slot.iter_mut().zip(delta.data()) {
                *w += d;
            }
        }
        Ok(m)
    }

    fn adam_update(&mut self, key: String, grad: &[f64], params: &mut [f64], lr: f64) {
        let (m1, m2) = self
            .moments
            .entry(key)
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let t = self.step as f64;
        let bc1 = 1.0 - crate::math::powi(ADAM_BETA1, t as i32);
        let bc2 = 1.0 - crate::math::powi(ADAM_BETA2, t as i32);
        for i in 0..grad.len() {
            m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * grad[i];
            m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let mhat = m1[i] / bc1;
            let vhat = m2[i] / bc2;
            params[i] -= lr * mhat / (crate::math::sqrt(vhat) + ADAM_EPS);
        }
    }
}

/// Run the training loop: Adam on adapter parameters (or all parameters for
/// `Scheme::Full`), seeded batch sampling, per-step loss log, and a mean
/// activation-kurtosis probe every `kurtosis_every` steps.
pub fn finetune(
    mut state: TrainState,
    corpus_tokens: &[u32],
) -> Result<(TrainState, Vec<LogRow>)> {
    if corpus_tokens.len() < 2 {
        return Err(Error::Config("corpus is empty".into()));
    }
    let cfg = state.cfg.clone();
    let window = state.model.config.seq_len.min(corpus_tokens.len());
    let mut batch_rng = SeededRng::derive(cfg.seed, 0xBA7C);
    let probe = corpus::fixed_windows(corpus_tokens, window, 2)?;

    let trainables: Vec<String> = match cfg.scheme {
        Scheme::Full => param_names(&state.model.config),
        _ => {
            let mut t: Vec<String> = Vec::new();
            for ad in &state.adapters {
                let n = ad.proj.param_name(ad.layer);
                if !t.contains(&n) {
                    t.push(n);
                }
            }
            t
        }
    };

    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        state.step = step + 1;
        let eff = state.effective_model()?;
        let batch = corpus::sample_windows(corpus_tokens, window, cfg.batch.max(1), &mut batch_rng)?;
        let mut loss_sum = 0.0;
        let mut grad_sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for seq in &batch {
            let (loss, grads) = loss_and_grads(&eff, seq, &trainables)?;
            loss_sum += loss;
            for (k, g) in grads {
                let acc = grad_sum.entry(k).or_insert_with(|| vec![0.0; g.data().len()]);
                for (a, v) in acc.iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
        let bsz = batch.len() as f64;
        let loss = loss_sum / bsz;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {step}")));
        }
        for g in grad_sum.values_mut() {
            for v in g.iter_mut() {
                *v /= bsz;
            }
        }

        match cfg.scheme {
            Scheme::Full => {
                for (name, grad) in &grad_sum {
                    // Params are copied out to avoid aliasing the moments map.
                    let mut params = state.model.param(name)?.to_vec();
                    state.adam_update(name.clone(), grad, &mut params, cfg.learn_rate);
                    state.model.param_mut(name)?.copy_from_slice(&params);
                }
            }
            _ => {
                for idx in 0..state.adapters.len() {
                    let ad = &state.adapters[idx];
                    let name = ad.proj.param_name(ad.layer);
                    let grad_w = match grad_sum.get(&name) {
                        Some(g) => g,
                        None => continue,
                    };
                    let (d_in, d_out) = state.model.param_shape(&name)?;
                    let gw = Matrix::from_vec(d_in, d_out, grad_w.clone())?;
                    let ga = matmul(&gw, &state.adapters[idx].b.transpose())?
                        .scale(state.adapters[idx].scaling);
                    let gb = matmul(&state.adapters[idx].a.transpose(), &gw)?
                        .scale(state.adapters[idx].scaling);
                    let mut a_data = state.adapters[idx].a.data().to_vec();
                    self_update(&mut state, format!("lora.{idx}.a"), ga.data(), &mut a_data, cfg.learn_rate);
                    state.adapters[idx].a.data_mut().copy_from_slice(&a_data);
                    let mut b_data = state.adapters[idx].b.data().to_vec();
                    self_update(&mut state, format!("lora.{idx}.b"), gb.data(), &mut b_data, cfg.learn_rate);
                    state.adapters[idx].b.data_mut().copy_from_slice(&b_data);
                }
            }
        }

        let kurt = if cfg.kurtosis_every > 0 && step % cfg.kurtosis_every == 0 {
            let eff = state.effective_model()?;
            Some(analysis::mean_activation_kurtosis(&eff, &probe)?)
        } else {
            None
        };
        log.push(LogRow { step, loss, kurtosis: kurt });
    }
    Ok((state, log))
}

fn self_update(state: &mut TrainState, key: String, grad: &[f64], params: &mut [f64], lr: f64) {
    state.adam_update(key, grad, params, lr);
}

/// Merge adapters into plain weights. LAR/plain: `W += scaling·A·B`. LBR:
/// merge into the unrotated weights first, then apply the recorded rotation.
pub fn merge_adapters(state: &TrainState) -> Result<ModelCheckpoint> {
    let mut m = state.model.clone();
    for ad in &state.adapters {
        let delta = matmul(&ad.a, &ad.b)?.scale(ad.scaling);
        let slot = m.param_mut(&ad.proj.param_name(ad.layer))?;
        for (w, d) in slot.iter_mut().zip(delta.data()) {
            *w += d;
        }
    }
    if state.cfg.scheme == Scheme::RoloraLbr {
        let plan = state
            .cfg
            .rotation
            .ok_or_else(|| Error::Config("LBR merge requires a rotation plan".into()))?;
        m = apply_rotation_plan(m, &plan)?;
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// End-to-end pipeline recipes
// ---------------------------------------------------------------------------

/// The three train/rotate/quantize orderings under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Recipe {
    /// Rotate → finetune (LAR) → merge → PTQ.
    Rolora,
    /// Finetune → merge → rotate → PTQ.
    PostTrainingRotation,
    /// Finetune → merge → PTQ.
    Plain,
}

/// Held-out evaluation of one recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub recipe: Recipe,
    pub exact_loss: f64,
    pub quant_loss: f64,
    pub degradation: f64,
}

const EVAL_WINDOWS: usize = 48;
const CALIB_WINDOWS: usize = 16;

/// Run one recipe end to end and evaluate exact vs fake-quant held-out loss.
pub fn run_pipeline(
    base: &ModelCheckpoint,
    recipe: Recipe,
    ft: &FinetuneConfig,
    spec: &QuantSpec,
    corpus_tokens: &[u32],
    plan: &RotationPlan,
) -> Result<PipelineReport> {
    let (train, heldout) = corpus::split(corpus_tokens, 0.1);
    let mut cfg = ft.clone();
    let merged = match recipe {
        Recipe::Rolora => {
            cfg.scheme = Scheme::RoloraLar;
            cfg.rotation = Some(*plan);
            let rotated = apply_rotation_plan(base.clone(), plan)?;
            let state = attach_adapters(rotated, cfg)?;
            let (state, _) = finetune(state, train)?;
            merge_adapters(&state)?
        }
        Recipe::PostTrainingRotation => {
            cfg.scheme = Scheme::PlainLora;
            cfg.rotation = None;
            let state = attach_adapters(base.clone(), cfg)?;
            let (state, _) = finetune(state, train)?;
            apply_rotation_plan(merge_adapters(&state)?, plan)?
        }
        Recipe::Plain => {
            cfg.scheme = Scheme::PlainLora;
            cfg.rotation = None;
            let state = attach_adapters(base.clone(), cfg)?;
            let (state, _) = finetune(state, train)?;
            merge_adapters(&state)?
        }
    };
    evaluate_quantized(&merged, recipe, spec, train, heldout)
}

/// Exact vs fake-quant held-out loss for a finished checkpoint. GPTQ
/// calibrates on the held-in split only.
pub fn evaluate_quantized(
    m: &ModelCheckpoint,
    recipe: Recipe,
    spec: &QuantSpec,
    holdin: &[u32],
    heldout: &[u32],
) -> Result<PipelineReport> {
    let window = m.config.seq_len.min(heldout.len()).min(holdin.len());
    let eval = corpus::fixed_windows(heldout, window, EVAL_WINDOWS)?;
    let calib = corpus::fixed_windows(holdin, window, CALIB_WINDOWS)?;
    let fq = quant::fake_quant_weights(m, spec, &calib)?;
    let mut exact = 0.0;
    let mut quantized = 0.0;
    for seq in &eval {
        exact += model::sequence_loss(m, seq, None)?;
        quantized += fq.loss(seq)?;
    }
    exact /= eval.len() as f64;
    quantized /= eval.len() as f64;
    Ok(PipelineReport { recipe, exact_loss: exact, quant_loss: quantized, degradation: quantized - exact })
}

/// Train a full-parameter model from `base_cfg` to produce W_FT, then run the
/// SVD approximation experiment for every (layer, target) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Fig4Row {
    pub target: String,
    pub scheme: &'static str,
    pub rank: usize,
    pub error: f64,
}

pub fn run_fig4(
    base: &ModelCheckpoint,
    corpus_tokens: &[u32],
    ft: &FinetuneConfig,
    q: &crate::hadamard::RotationMatrix,
    ranks: &[usize],
    targets: &[ProjKind],
) -> Result<Vec<Fig4Row>> {
    let mut cfg = ft.clone();
    cfg.scheme = Scheme::Full;
    cfg.rotation = None;
    let state = attach_adapters(base.clone(), cfg)?;
    let (state, _) = finetune(state, corpus_tokens)?;
    let w_ft_model = state.model;

    let mut rows = Vec::new();
    for layer in 0..base.config.n_layers {
        for &proj in targets {
            let name = proj.param_name(layer);
            let (r, c) = base.param_shape(&name)?;
            let w0 = Matrix::from_vec(r, c, base.param(&name)?.to_vec())?;
            let w_ft = Matrix::from_vec(r, c, w_ft_model.param(&name)?.to_vec())?;
            for row in analysis::svd_approx_experiment(&w0, &w_ft, q, ranks, proj.side())? {
                rows.push(Fig4Row {
                    target: format!("l{layer}.{}", proj.field()),
                    scheme: row.scheme,
                    rank: row.rank,
                    error: row.error,
                });
            }
        }
    }
    Ok(rows)
}

/// Convenience used by tests and the CLI: a seeded base model from a config.
pub fn base_model(config: &model::ModelConfig) -> Result<ModelCheckpoint> {
    init_model(config)
}
