//! Desk-scale LLaMA-style pre-norm decoder: RMSNorm, causal attention,
//! SwiGLU FFN, learned absolute positions. Deterministic forward pass with
//! activation capture and fake-quant hooks, plus a manual backward pass.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hadamard::fwht_in_place;
use crate::linalg::{matmul, Matrix};
use crate::math;
use crate::quant::{self, QuantSpec, WeightQuantizer};
use crate::rng::SeededRng;
use crate::rotation::RotationSet;

pub const RMS_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Architecture configuration for the toy transformer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Number of residual-stream channels scaled up at init to plant
    /// activation outliers (0 = none).
    pub outlier_channels: usize,
    /// Multiplier applied to the planted channels.
    pub outlier_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 256,
            vocab: 128,
            seq_len: 64,
            seed: 0,
            outlier_channels: 0,
            outlier_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_power_of_two() {
            return Err(Error::Config(format!("d_model {} must be a power of two", self.d_model)));
        }
        if self.d_ffn == 0 || !self.d_ffn.is_power_of_two() {
            return Err(Error::Config(format!("d_ffn {} must be a power of two", self.d_ffn)));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be positive".into()));
        }
        if self.vocab == 0 || self.seq_len == 0 {
            return Err(Error::Config("vocab and seq_len must be positive".into()));
        }
        if self.outlier_scale <= 0.0 || !self.outlier_scale.is_finite() {
            return Err(Error::Config("outlier_scale must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        let per_layer = 2 * self.d_model                       // norm scales
            + 4 * self.d_model * self.d_model                  // wq wk wv wo
            + 2 * self.d_model * self.d_ffn                    // w_up w_gate
            + self.d_ffn * self.d_model;                       // w_down
        self.vocab * self.d_model
            + self.seq_len * self.d_model
            + self.n_layers * per_layer
            + self.d_model
            + self.d_model * self.vocab
    }
}

/// Weights of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub w_up: Matrix,
    pub w_gate: Matrix,
    pub w_down: Matrix,
}

/// Named weight collection plus architecture config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub embedding: Matrix, // vocab × d_model
    pub pos_table: Matrix, // seq_len × d_model
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub lm_head: Matrix, // d_model × vocab
    pub norm_fused: bool,
    pub rotated: Option<RotationSet>,
}

/// Captured activations and logits from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub captures: BTreeMap<String, Matrix>,
    pub logits: Matrix,
    pub loss: Option<f64>,
}

fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Seeded Gaussian init (std 0.02) for projections, ones for norm scales.
pub fn init_model(config: &ModelConfig) -> Result<ModelCheckpoint> {
    config.validate()?;
    let mut rng = SeededRng::derive(config.seed, 0x1217);
    let embedding = gaussian_matrix(&mut rng, config.vocab, config.d_model, INIT_STD);
    let pos_table = gaussian_matrix(&mut rng, config.seq_len, config.d_model, INIT_STD);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: vec![1.0; config.d_model],
            wq: gaussian_matrix(&mut rng, config.d_model, config.d_model, INIT_STD),
            wk: gaussian_matrix(&mut rng, config.d_model, config.d_model, INIT_STD),
            wv: gaussian_matrix(&mut rng, config.d_model, config.d_model, INIT_STD),
            wo: gaussian_matrix(&mut rng, config.d_model, config.d_model, INIT_STD),
            ffn_norm: vec![1.0; config.d_model],
            w_up: gaussian_matrix(&mut rng, config.d_model, config.d_ffn, INIT_STD),
            w_gate: gaussian_matrix(&mut rng, config.d_model, config.d_ffn, INIT_STD),
            w_down: gaussian_matrix(&mut rng, config.d_ffn, config.d_model, INIT_STD),
        });
    }
    let lm_head = gaussian_matrix(&mut rng, config.d_model, config.vocab, INIT_STD);
    let mut m = ModelCheckpoint {
        config: config.clone(),
        embedding,
        pos_table,
        layers,
        final_norm: vec![1.0; config.d_model],
        lm_head,
        norm_fused: false,
        rotated: None,
    };
    if m.config.outlier_channels > 0 {
        plant_outliers(&mut m, &mut rng);
    }
    Ok(m)
}

/// Scale a few residual-stream channels in every stream-producing weight so
/// the model exhibits per-channel activation outliers.
fn plant_outliers(m: &mut ModelCheckpoint, rng: &mut SeededRng) {
    let d = m.config.d_model;
    let n = m.config.outlier_channels.min(d);
    let scale = m.config.outlier_scale;
    let mut channels = Vec::with_capacity(n);
    while channels.len() < n {
        let c = rng.below(d);
        if !channels.contains(&c) {
            channels.push(c);
        }
    }
    let scale_cols = |w: &mut Matrix| {
        for i in 0..w.rows() {
            let row = w.row_mut(i);
            for &c in &channels {
                row[c] *= scale;
            }
        }
    };
    scale_cols(&mut m.embedding);
    scale_cols(&mut m.pos_table);
    for layer in &mut m.layers {
        scale_cols(&mut layer.wo);
        scale_cols(&mut layer.w_down);
    }
}

// ---------------------------------------------------------------------------
// Capture points
// ---------------------------------------------------------------------------

/// All valid capture point names for a config.
pub fn all_capture_points(config: &ModelConfig) -> Vec<String> {
    let mut pts = vec!["embed_out".to_string()];
    for i in 0..config.n_layers {
        pts.push(format!("l{i}.attn_in"));
        pts.push(format!("l{i}.o_in"));
        pts.push(format!("l{i}.ffn_in"));
        pts.push(format!("l{i}.down_in"));
        pts.push(format!("l{i}.out"));
    }
    pts.push("final_in".to_string());
    pts
}

/// The projection-input points (the activations the diagnostics profile).
pub fn projection_input_points(config: &ModelConfig) -> Vec<String> {
    let mut pts = Vec::new();
    for i in 0..config.n_layers {
        pts.push(format!("l{i}.attn_in"));
        pts.push(format!("l{i}.o_in"));
        pts.push(format!("l{i}.ffn_in"));
        pts.push(format!("l{i}.down_in"));
    }
    pts
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Weight/activation fake-quant settings threaded through the forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct QuantOverlay {
    /// RTN weight quantization (bits, clip ratio) for every projection weight.
    pub weight: Option<(u32, f64)>,
    /// RTN per-token activation quantization for every projection input.
    pub act_bits: Option<u32>,
}

impl QuantOverlay {
    pub(crate) fn from_spec(spec: &QuantSpec) -> Result<Self> {
        spec.validate()?;
        if spec.weight_quantizer == WeightQuantizer::Gptq {
            return Err(Error::Config(
                "GPTQ weights must be materialized via quant::fake_quant_forward".into(),
            ));
        }
        Ok(QuantOverlay {
            weight: Some((spec.weight_bits, spec.clip_ratio)),
            act_bits: Some(spec.act_bits),
        })
    }
}

fn eff_weight(w: &Matrix, overlay: Option<&QuantOverlay>) -> Result<Matrix> {
    match overlay.and_then(|o| o.weight) {
        Some((bits, clip)) => Ok(quant::rtn_quantize_weight(w, bits, clip)?.dequantize()),
        None => Ok(w.clone()),
    }
}

fn eff_act(x: &Matrix, overlay: Option<&QuantOverlay>) -> Result<Matrix> {
    match overlay.and_then(|o| o.act_bits) {
        Some(bits) => Ok(quant::rtn_quantize_activation(x, bits)?.dequantize()),
        None => Ok(x.clone()),
    }
}

pub(crate) fn rmsnorm_rows(x: &Matrix, scale: &[f64]) -> Matrix {
    let d = x.cols();
    let mut y = x.clone();
    for i in 0..x.rows() {
        let row = y.row_mut(i);
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = math::sqrt(ms + RMS_EPS);
        for (v, g) in row.iter_mut().zip(scale) {
            *v = *v * *g / r;
        }
    }
    y
}

fn silu(x: f64) -> f64 {
    x / (1.0 + math::exp(-x))
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + math::exp(-x));
    s * (1.0 + x * (1.0 - s))
}

/// Causal softmax over each row prefix; row t uses columns 0..=t.
fn causal_softmax_in_place(s: &mut Matrix) {
    let n = s.rows();
    for t in 0..n {
        let row = s.row_mut(t);
        let mut mx = f64::NEG_INFINITY;
        for &v in row[..=t].iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for v in row[..=t].iter_mut() {
            *v = math::exp(*v - mx);
            sum += *v;
        }
        for v in row[..=t].iter_mut() {
            *v /= sum;
        }
        for v in row[t + 1..].iter_mut() {
            *v = 0.0;
        }
    }
}

struct LayerTape {
    x_in: Matrix,
    attn_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    o: Matrix,
    x_mid: Matrix,
    ffn_in: Matrix,
    g: Matrix,
    u: Matrix,
    s_post: Matrix,
}

struct Tape {
    layers: Vec<LayerTape>,
    final_in: Matrix,
    x_final: Matrix,
}

fn head_slice(x: &Matrix, head: usize, hd: usize) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), hd);
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&x.row(i)[head * hd..(head + 1) * hd]);
    }
    out
}

fn head_slice_write(dst: &mut Matrix, src: &Matrix, head: usize, hd: usize) {
    for i in 0..dst.rows() {
        dst.row_mut(i)[head * hd..(head + 1) * hd].copy_from_slice(src.row(i));
    }
}

fn head_slice_add(dst: &mut Matrix, src: &Matrix, head: usize, hd: usize) {
    for i in 0..dst.rows() {
        for j in 0..hd {
            dst.row_mut(i)[head * hd + j] += src.get(i, j);
        }
    }
}

fn forward_internal(
    m: &ModelCheckpoint,
    tokens: &[u32],
    capture: &[String],
    overlay: Option<&QuantOverlay>,
    keep_tape: bool,
) -> Result<(ForwardTrace, Option<Tape>)> {
    let cfg = &m.config;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds seq_len {}",
            tokens.len(),
            cfg.seq_len
        )));
    }
    for &t in tokens {
        if t as usize >= cfg.vocab {
            return Err(Error::Input(format!("token {t} out of vocab {}", cfg.vocab)));
        }
    }
    let valid = all_capture_points(cfg);
    for c in capture {
        if !valid.contains(c) {
            return Err(Error::Config(format!("unknown capture point '{c}'")));
        }
    }

    let n = tokens.len();
    let (dm, hd, heads) = (cfg.d_model, cfg.head_dim(), cfg.n_heads);
    let ibr = m.rotated.as_ref().map_or(false, |r| r.r2_enabled);
    let scale = 1.0 / math::sqrt(hd as f64);

    let mut captures = BTreeMap::new();
    let mut grab = |name: String, val: &Matrix| {
        if capture.contains(&name) {
            captures.insert(name, val.clone());
        }
    };

    let mut x = Matrix::zeros(n, dm);
    for (i, &t) in tokens.iter().enumerate() {
        let e = m.embedding.row(t as usize);
        let p = m.pos_table.row(i);
        let row = x.row_mut(i);
        for j in 0..dm {
            row[j] = e[j] + p[j];
        }
    }
    grab("embed_out".to_string(), &x);

    let mut tape_layers = Vec::new();
    for (li, layer) in m.layers.iter().enumerate() {
        let x_in = x.clone();
        let attn_in = rmsnorm_rows(&x, &layer.attn_norm);
        grab(format!("l{li}.attn_in"), &attn_in);
        let aq = eff_act(&attn_in, overlay)?;
        let q = matmul(&aq, &eff_weight(&layer.wq, overlay)?)?;
        let k = matmul(&aq, &eff_weight(&layer.wk, overlay)?)?;
        let v = matmul(&aq, &eff_weight(&layer.wv, overlay)?)?;

        let mut o = Matrix::zeros(n, dm);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = head_slice(&q, h, hd);
            let kh = head_slice(&k, h, hd);
            let vh = head_slice(&v, h, hd);
            let mut s = matmul(&qh, &kh.transpose())?.scale(scale);
            causal_softmax_in_place(&mut s);
            let oh = matmul(&s, &vh)?;
            head_slice_write(&mut o, &oh, h, hd);
            if keep_tape {
                probs.push(s);
            }
        }
        grab(format!("l{li}.o_in"), &o);
        let oq = eff_act(&o, overlay)?;
        let attn_out = matmul(&oq, &eff_weight(&layer.wo, overlay)?)?;
        let x_mid = x.add(&attn_out)?;

        let ffn_in = rmsnorm_rows(&x_mid, &layer.ffn_norm);
        grab(format!("l{li}.ffn_in"), &ffn_in);
        let fq = eff_act(&ffn_in, overlay)?;
        let g = matmul(&fq, &eff_weight(&layer.w_gate, overlay)?)?;
        let u = matmul(&fq, &eff_weight(&layer.w_up, overlay)?)?;
        let mut s_post = Matrix::zeros(n, cfg.d_ffn);
        for i in 0..n {
            let row = s_post.row_mut(i);
            for j in 0..cfg.d_ffn {
                row[j] = silu(g.get(i, j)) * u.get(i, j);
            }
        }
        if ibr {
            for i in 0..n {
                fwht_in_place(s_post.row_mut(i), true)?;
            }
        }
        grab(format!("l{li}.down_in"), &s_post);
        let sq = eff_act(&s_post, overlay)?;
        let f = matmul(&sq, &eff_weight(&layer.w_down, overlay)?)?;
        x = x_mid.add(&f)?;
        grab(format!("l{li}.out"), &x);

        if keep_tape {
            tape_layers.push(LayerTape {
                x_in,
                attn_in,
                q,
                k,
                v,
                probs,
                o,
                x_mid,
                ffn_in,
                g,
                u,
                s_post,
            });
        }
    }

    let final_in = rmsnorm_rows(&x, &m.final_norm);
    grab("final_in".to_string(), &final_in);
    let logits = matmul(&final_in, &m.lm_head)?;
    if !logits.is_finite() {
        return Err(Error::Numerical("non-finite logits in forward".into()));
    }

    let tape = if keep_tape {
        Some(Tape { layers: tape_layers, final_in, x_final: x })
    } else {
        None
    };
    Ok((ForwardTrace { captures, logits, loss: None }, tape))
}

/// Run a single decoder layer on a given residual-stream input.
pub(crate) fn layer_apply(
    m: &ModelCheckpoint,
    layer_index: usize,
    x_in: &Matrix,
    overlay: Option<&QuantOverlay>,
) -> Result<Matrix> {
    let cfg = &m.config;
    if layer_index >= m.layers.len() {
        return Err(Error::Config(format!("layer index {layer_index} out of range")));
    }
    let layer = &m.layers[layer_index];
    let n = x_in.rows();
    let (dm, hd, heads) = (cfg.d_model, cfg.head_dim(), cfg.n_heads);
    let scale = 1.0 / math::sqrt(hd as f64);
    let ibr = m.rotated.as_ref().map_or(false, |r| r.r2_enabled);

    let attn_in = rmsnorm_rows(x_in, &layer.attn_norm);
    let aq = eff_act(&attn_in, overlay)?;
    let q = matmul(&aq, &eff_weight(&layer.wq, overlay)?)?;
    let k = matmul(&aq, &eff_weight(&layer.wk, overlay)?)?;
    let v = matmul(&aq, &eff_weight(&layer.wv, overlay)?)?;
    let mut o = Matrix::zeros(n, dm);
    for h in 0..heads {
        let qh = head_slice(&q, h, hd);
        let kh = head_slice(&k, h, hd);
        let vh = head_slice(&v, h, hd);
        let mut s = matmul(&qh, &kh.transpose())?.scale(scale);
        causal_softmax_in_place(&mut s);
        let oh = matmul(&s, &vh)?;
        head_slice_write(&mut o, &oh, h, hd);
    }
    let oq = eff_act(&o, overlay)?;
    let x_mid = x_in.add(&matmul(&oq, &eff_weight(&layer.wo, overlay)?)?)?;

    let ffn_in = rmsnorm_rows(&x_mid, &layer.ffn_norm);
    let fq = eff_act(&ffn_in, overlay)?;
    let g = matmul(&fq, &eff_weight(&layer.w_gate, overlay)?)?;
    let u = matmul(&fq, &eff_weight(&layer.w_up, overlay)?)?;
    let mut s_post = Matrix::zeros(n, cfg.d_ffn);
    for i in 0..n {
        let row = s_post.row_mut(i);
        for j in 0..cfg.d_ffn {
            row[j] = silu(g.get(i, j)) * u.get(i, j);
        }
    }
    if ibr {
        for i in 0..n {
            fwht_in_place(s_post.row_mut(i), true)?;
        }
    }
    let sq = eff_act(&s_post, overlay)?;
    x_mid.add(&matmul(&sq, &eff_weight(&layer.w_down, overlay)?)?)
}

/// Deterministic forward pass. When `quant` is given, projection weights and
/// projection-input activations are fake-quantized (RTN only;
/// GPTQ weights go through [`quant::fake_quant_forward`]).
pub fn forward(
    m: &ModelCheckpoint,
    tokens: &[u32],
    capture: &[String],
    quant_spec: Option<&QuantSpec>,
) -> Result<ForwardTrace> {
    let overlay = match quant_spec {
        Some(s) => Some(QuantOverlay::from_spec(s)?),
        None => None,
    };
    let (trace, _) = forward_internal(m, tokens, capture, overlay.as_ref(), false)?;
    Ok(trace)
}

pub(crate) fn forward_with_overlay(
    m: &ModelCheckpoint,
    tokens: &[u32],
    capture: &[String],
    overlay: Option<&QuantOverlay>,
) -> Result<ForwardTrace> {
    let (trace, _) = forward_internal(m, tokens, capture, overlay, false)?;
    Ok(trace)
}

/// Mean next-token cross-entropy of `logits` against shifted targets.
pub fn cross_entropy(logits: &Matrix, tokens: &[u32]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Input("need at least 2 tokens for next-token loss".into()));
    }
    let n = tokens.len();
    let mut loss = 0.0;
    for i in 0..n - 1 {
        let row = logits.row(i);
        let target = tokens[i + 1] as usize;
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });
        let lse = mx + math::ln(row.iter().map(|&v| math::exp(v - mx)).sum::<f64>());
        loss += lse - row[target];
    }
    Ok(loss / (n - 1) as f64)
}

/// Forward + next-token loss in one call.
pub fn sequence_loss(
    m: &ModelCheckpoint,
    tokens: &[u32],
    quant_spec: Option<&QuantSpec>,
) -> Result<f64> {
    let trace = forward(m, tokens, &[], quant_spec)?;
    cross_entropy(&trace.logits, tokens)
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// All trainable parameter names of a model.
pub fn param_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["embedding".to_string(), "pos_table".to_string()];
    for i in 0..config.n_layers {
        for p in ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_up", "w_gate", "w_down"] {
            names.push(format!("layers.{i}.{p}"));
        }
    }
    names.push("final_norm".to_string());
    names.push("lm_head".to_string());
    names
}

impl ModelCheckpoint {
    /// Shape of a named parameter; norm scales report as (1, d_model).
    pub fn param_shape(&self, name: &str) -> Result<(usize, usize)> {
        let d = self.config.d_model;
        let slice = self.param(name)?;
        Ok(match slice.len() {
            l if l == d => (1, d),
            l => {
                // infer from known layouts
                if name == "embedding" {
                    (self.config.vocab, d)
                } else if name == "pos_table" {
                    (self.config.seq_len, d)
                } else if name == "lm_head" {
                    (d, self.config.vocab)
                } else if name.ends_with("w_up") || name.ends_with("w_gate") {
                    (d, self.config.d_ffn)
                } else if name.ends_with("w_down") {
                    (self.config.d_ffn, d)
                } else {
                    debug_assert_eq!(l, d * d);
                    (d, d)
                }
            }
        })
    }

    pub fn param(&self, name: &str) -> Result<&[f64]> {
        match name {
            "embedding" => Ok(self.embedding.data()),
            "pos_table" => Ok(self.pos_table.data()),
            "final_norm" => Ok(&self.final_norm),
            "lm_head" => Ok(self.lm_head.data()),
            _ => {
                let (idx, field) = parse_layer_param(name, self.layers.len())?;
                let layer = &self.layers[idx];
                Ok(match field {
                    "attn_norm" => &layer.attn_norm,
                    "wq" => layer.wq.data(),
                    "wk" => layer.wk.data(),
                    "wv" => layer.wv.data(),
                    "wo" => layer.wo.data(),
                    "ffn_norm" => &layer.ffn_norm,
                    "w_up" => layer.w_up.data(),
                    "w_gate" => layer.w_gate.data(),
                    "w_down" => layer.w_down.data(),
                    _ => unreachable!(),
                })
            }
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        match name {
            "embedding" => Ok(self.embedding.data_mut()),
            "pos_table" => Ok(self.pos_table.data_mut()),
            "final_norm" => Ok(&mut self.final_norm),
            "lm_head" => Ok(self.lm_head.data_mut()),
            _ => {
                let (idx, field) = parse_layer_param(name, self.layers.len())?;
                let layer = &mut self.layers[idx];
                Ok(match field {
                    "attn_norm" => &mut layer.attn_norm,
                    "wq" => layer.wq.data_mut(),
                    "wk" => layer.wk.data_mut(),
                    "wv" => layer.wv.data_mut(),
                    "wo" => layer.wo.data_mut(),
                    "ffn_norm" => &mut layer.ffn_norm,
                    "w_up" => layer.w_up.data_mut(),
                    "w_gate" => layer.w_gate.data_mut(),
                    "w_down" => layer.w_down.data_mut(),
                    _ => unreachable!(),
                })
            }
        }
    }
}

fn parse_layer_param<'a>(name: &'a str, n_layers: usize) -> Result<(usize, &'a str)> {
    let rest = name
        .strip_prefix("layers.")
        .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
    let (idx_str, field) = rest
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
    let idx: usize = idx_str
        .parse()
        .map_err(|_| Error::Config(format!("unknown parameter '{name}'")))?;
    if idx >= n_layers {
        return Err(Error::Config(format!("layer index {idx} out of range")));
    }
    match field {
        "attn_norm" | "wq" | "wk" | "wv" | "wo" | "ffn_norm" | "w_up" | "w_gate" | "w_down" => {
            Ok((idx, field))
        }
        _ => Err(Error::Config(format!("unknown parameter '{name}'"))),
    }
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// RMSNorm backward for a batch of rows. Returns dx; accumulates dscale.
fn rmsnorm_backward(x: &Matrix, scale: &[f64], dy: &Matrix, dscale: &mut [f64]) -> Matrix {
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let xr = x.row(i);
        let dyr = dy.row(i);
        let ms: f64 = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = math::sqrt(ms + RMS_EPS);
        let mut hx = 0.0;
        for j in 0..d {
            dscale[j] += dyr[j] * xr[j] / r;
            hx += dyr[j] * scale[j] * xr[j];
        }
        let dxr = dx.row_mut(i);
        let r3 = r * r * r;
        for j in 0..d {
            dxr[j] = dyr[j] * scale[j] / r - xr[j] * hx / (d as f64 * r3);
        }
    }
    dx
}

/// Mean cross-entropy over shifted next-token targets plus gradients for the
/// named trainable parameters. Everything else is treated as constant.
pub fn loss_and_grads(
    m: &ModelCheckpoint,
    tokens: &[u32],
    trainables: &[String],
) -> Result<(f64, BTreeMap<String, Matrix>)> {
    if tokens.len() < 2 {
        return Err(Error::Input("need at least 2 tokens for next-token loss".into()));
    }
    let valid = param_names(&m.config);
    for t in trainables {
        if !valid.contains(t) {
            return Err(Error::Config(format!("unknown trainable '{t}'")));
        }
    }

    let (trace, tape) = forward_internal(m, tokens, &[], None, true)?;
    let tape = tape.unwrap();
    let loss = cross_entropy(&trace.logits, tokens)?;

    let cfg = &m.config;
    let n = tokens.len();
    let (dm, hd, heads) = (cfg.d_model, cfg.head_dim(), cfg.n_heads);
    let scale = 1.0 / math::sqrt(hd as f64);

    // dlogits from softmax cross-entropy; last row carries no target.
    let mut dlogits = Matrix::zeros(n, cfg.vocab);
    let denom = (n - 1) as f64;
    for i in 0..n - 1 {
        let row = trace.logits.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });
        let exps: Vec<f64> = row.iter().map(|&v| math::exp(v - mx)).collect();
        let sum: f64 = exps.iter().sum();
        let drow = dlogits.row_mut(i);
        for j in 0..cfg.vocab {
            drow[j] = exps[j] / sum / denom;
        }
        drow[tokens[i + 1] as usize] -= 1.0 / denom;
    }

    let mut grads: BTreeMap<String, Matrix> = BTreeMap::new();
    let mut add_grad = |name: String, g: Matrix| {
        grads.insert(name, g);
    };

    // lm_head and final norm
    let dlm_head = matmul(&tape.final_in.transpose(), &dlogits)?;
    let dfinal_in = matmul(&dlogits, &m.lm_head.transpose())?;
    let mut dfinal_norm = vec![0.0; dm];
    let mut dx = rmsnorm_backward(&tape.x_final, &m.final_norm, &dfinal_in, &mut dfinal_norm);
    add_grad("lm_head".to_string(), dlm_head);
    add_grad("final_norm".to_string(), Matrix::from_vec(1, dm, dfinal_norm)?);

    for (li, layer) in m.layers.iter().enumerate().rev() {
        let t = &tape.layers[li];
        // FFN block: x_out = x_mid + s_post · w_down
        let df = &dx;
        let mut ds_post = matmul(df, &layer.w_down.transpose())?;
        let dw_down = matmul(&t.s_post.transpose(), df)?;
        if m.rotated.as_ref().map_or(false, |r| r.r2_enabled) {
            // FWHT is symmetric orthogonal, so the backward transform is itself.
            for i in 0..n {
                fwht_in_place(ds_post.row_mut(i), true)?;
            }
        }
        let mut dg = Matrix::zeros(n, cfg.d_ffn);
        let mut du = Matrix::zeros(n, cfg.d_ffn);
        for i in 0..n {
            for j in 0..cfg.d_ffn {
                let gv = t.g.get(i, j);
                let uv = t.u.get(i, j);
                let dsp = ds_post.get(i, j);
                dg.set(i, j, dsp * uv * silu_grad(gv));
                du.set(i, j, dsp * silu(gv));
            }
        }
        let dw_gate = matmul(&t.ffn_in.transpose(), &dg)?;
        let dw_up = matmul(&t.ffn_in.transpose(), &du)?;
        let dffn_in = matmul(&dg, &layer.w_gate.transpose())?
            .add(&matmul(&du, &layer.w_up.transpose())?)?;
        let mut dffn_norm = vec![0.0; dm];
        let dx_mid_norm = rmsnorm_backward(&t.x_mid, &layer.ffn_norm, &dffn_in, &mut dffn_norm);
        let dx_mid = dx.add(&dx_mid_norm)?;

        // Attention block: x_mid = x_in + o · wo
        let dattn_out = &dx_mid;
        let do_ = matmul(dattn_out, &layer.wo.transpose())?;
        let dwo = matmul(&t.o.transpose(), dattn_out)?;
        let mut dq = Matrix::zeros(n, dm);
        let mut dk = Matrix::zeros(n, dm);
        let mut dv = Matrix::zeros(n, dm);
        for h in 0..heads {
            let doh = head_slice(&do_, h, hd);
            let qh = head_slice(&t.q, h, hd);
            let kh = head_slice(&t.k, h, hd);
            let vh = head_slice(&t.v, h, hd);
            let p = &t.probs[h];
            let dvh = matmul(&p.transpose(), &doh)?;
            let dp = matmul(&doh, &vh.transpose())?;
            // softmax backward per row over the causal prefix
            let mut dsc = Matrix::zeros(n, n);
            for i in 0..n {
                let pr = p.row(i);
                let dpr = dp.row(i);
                let dot: f64 = pr[..=i].iter().zip(&dpr[..=i]).map(|(a, b)| a * b).sum();
                let dscr = dsc.row_mut(i);
                for j in 0..=i {
                    dscr[j] = pr[j] * (dpr[j] - dot) * scale;
                }
            }
            let dqh = matmul(&dsc, &kh)?;
            let dkh = matmul(&dsc.transpose(), &qh)?;
            head_slice_add(&mut dq, &dqh, h, hd);
            head_slice_add(&mut dk, &dkh, h, hd);
            head_slice_add(&mut dv, &dvh, h, hd);
        }
        let dwq = matmul(&t.attn_in.transpose(), &dq)?;
        let dwk = matmul(&t.attn_in.transpose(), &dk)?;
        let dwv = matmul(&t.attn_in.transpose(), &dv)?;
        let dattn_in = matmul(&dq, &layer.wq.transpose())?
            .add(&matmul(&dk, &layer.wk.transpose())?)?
            .add(&matmul(&dv, &layer.wv.transpose())?)?;
        let mut dattn_norm = vec![0.0; dm];
        let dx_in_norm = rmsnorm_backward(&t.x_in, &layer.attn_norm, &dattn_in, &mut dattn_norm);
        dx = dx_mid.add(&dx_in_norm)?;

        add_grad(format!("layers.{li}.wq"), dwq);
        add_grad(format!("layers.{li}.wk"), dwk);
        add_grad(format!("layers.{li}.wv"), dwv);
        add_grad(format!("layers.{li}.wo"), dwo);
        add_grad(format!("layers.{li}.w_up"), dw_up);
        add_grad(format!("layers.{li}.w_gate"), dw_gate);
        add_grad(format!("layers.{li}.w_down"), dw_down);
        add_grad(format!("layers.{li}.attn_norm"), Matrix::from_vec(1, dm, dattn_norm)?);
        add_grad(format!("layers.{li}.ffn_norm"), Matrix::from_vec(1, dm, dffn_norm)?);
    }

    // embedding and position table
    let mut demb = Matrix::zeros(cfg.vocab, dm);
    let mut dpos = Matrix::zeros(cfg.seq_len, dm);
    for (i, &t) in tokens.iter().enumerate() {
        for j in 0..dm {
            let g = dx.get(i, j);
            let e = demb.get(t as usize, j) + g;
            demb.set(t as usize, j, e);
            let p = dpos.get(i, j) + g;
            dpos.set(i, j, p);
        }
    }
    add_grad("embedding".to_string(), demb);
    add_grad("pos_table".to_string(), dpos);

    grads.retain(|k, _| trainables.contains(k));
    Ok((loss, grads))
}
