//! Weight and activation quantization: RTN grids, the GPTQ weight solver,
//! fake-quant execution, and quantization-error measurement.
//!
//! Weights are symmetric per-output-channel; activations are asymmetric
//! per-token. Rounding ties go half away from zero.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, frobenius_norm, matmul, spd_inverse, Matrix};
use crate::math;
use crate::model::{self, ModelCheckpoint, QuantOverlay};

pub const ALLOWED_BITS: [u32; 4] = [4, 6, 8, 16];
const SCALE_FLOOR: f64 = 1e-12;

/// Which quantizer handles weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum WeightQuantizer {
    Rtn,
    Gptq,
}

/// Joint weight-activation quantization settings (e.g. W4A4).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub weight_quantizer: WeightQuantizer,
    pub clip_ratio: f64,
}

impl Default for QuantSpec {
    fn default() -> Self {
        QuantSpec { weight_bits: 4, act_bits: 4, weight_quantizer: WeightQuantizer::Rtn, clip_ratio: 1.0 }
    }
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        for (label, bits) in [("weight_bits", self.weight_bits), ("act_bits", self.act_bits)] {
            if !ALLOWED_BITS.contains(&bits) {
                return Err(Error::Config(format!("{label} {bits} not in {ALLOWED_BITS:?}")));
            }
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio <= 1.0) {
            return Err(Error::Config(format!("clip_ratio {} not in (0, 1]", self.clip_ratio)));
        }
        Ok(())
    }
}

/// Axis the quantization groups run along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupAxis {
    /// One group per column (per output channel).
    Column,
    /// One group per row (per token).
    Row,
}

/// Integer codes plus per-group scales (and zero points when asymmetric).
#[derive(Debug, Clone)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub codes: Vec<i32>,
    pub scales: Vec<f64>,
    pub zero_points: Option<Vec<i32>>,
    pub group_axis: GroupAxis,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        match self.group_axis {
            GroupAxis::Column => {
                for i in 0..self.rows {
                    for j in 0..self.cols {
                        out.set(i, j, self.codes[i * self.cols + j] as f64 * self.scales[j]);
                    }
                }
            }
            GroupAxis::Row => {
                let zps = self.zero_points.as_ref().expect("asymmetric rows carry zero points");
                for i in 0..self.rows {
                    let s = self.scales[i];
                    let z = zps[i];
                    for j in 0..self.cols {
                        out.set(i, j, (self.codes[i * self.cols + j] - z) as f64 * s);
                    }
                }
            }
        }
        out
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if ALLOWED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("bit width {bits} not in {ALLOWED_BITS:?}")))
    }
}

fn column_scales(w: &Matrix, bits: u32, clip_ratio: f64) -> Vec<f64> {
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let mut scales = vec![0.0; w.cols()];
    for j in 0..w.cols() {
        let mut mx = 0.0;
        for i in 0..w.rows() {
            let a = math::abs(w.get(i, j));
            if a > mx {
                mx = a;
            }
        }
        let s = clip_ratio * mx / qmax;
        scales[j] = if s < SCALE_FLOOR { SCALE_FLOOR } else { s };
    }
    scales
}

/// Symmetric per-output-channel RTN weight quantization.
pub fn rtn_quantize_weight(w: &Matrix, bits: u32, clip_ratio: f64) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    if !(clip_ratio > 0.0 && clip_ratio <= 1.0) {
        return Err(Error::Config(format!("clip_ratio {clip_ratio} not in (0, 1]")));
    }
    let lo = -(1i64 << (bits - 1)) as f64;
    let hi = ((1i64 << (bits - 1)) - 1) as f64;
    let scales = column_scales(w, bits, clip_ratio);
    let mut codes = vec![0i32; w.rows() * w.cols()];
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let c = math::round_half_away(w.get(i, j) / scales[j]).clamp(lo, hi);
            codes[i * w.cols() + j] = c as i32;
        }
    }
    Ok(QuantizedTensor {
        rows: w.rows(),
        cols: w.cols(),
        bits,
        codes,
        scales,
        zero_points: None,
        group_axis: GroupAxis::Column,
    })
}

/// Asymmetric per-token (per-row) RTN activation quantization.
pub fn rtn_quantize_activation(x: &Matrix, bits: u32) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    let qmax = ((1i64 << bits) - 1) as f64;
    let mut scales = vec![0.0; x.rows()];
    let mut zps = vec![0i32; x.rows()];
    let mut codes = vec![0i32; x.rows() * x.cols()];
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut mn = f64::INFINITY;
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            if v < mn {
                mn = v;
            }
            if v > mx {
                mx = v;
            }
        }
        if mx - mn <= SCALE_FLOOR {
            // Constant row: pick a grid that reproduces the constant exactly.
            let c = mn;
            let s = if math::abs(c) > SCALE_FLOOR { math::abs(c) } else { SCALE_FLOOR };
            scales[i] = s;
            zps[i] = if c < -SCALE_FLOOR { 1 } else { 0 };
            let code = if c > SCALE_FLOOR { 1 } else { 0 };
            for j in 0..x.cols() {
                codes[i * x.cols() + j] = code;
            }
            continue;
        }
        let s = (mx - mn) / qmax;
        let zp = math::round_half_away(-mn / s);
        scales[i] = s;
        zps[i] = zp as i32;
        for (j, &v) in row.iter().enumerate() {
            let c = math::round_half_away(v / s + zp).clamp(0.0, qmax);
            codes[i * x.cols() + j] = c as i32;
        }
    }
    Ok(QuantizedTensor {
        rows: x.rows(),
        cols: x.cols(),
        bits,
        codes,
        scales,
        zero_points: Some(zps),
        group_axis: GroupAxis::Row,
    })
}

/// Calibration-reconstruction proxy loss `‖X(W − Ŵ)‖F²`.
pub fn proxy_loss(x: &Matrix, w: &Matrix, w_hat: &Matrix) -> Result<f64> {
    let diff = w.sub(w_hat)?;
    let e = matmul(x, &diff)?;
    let n = frobenius_norm(&e);
    Ok(n * n)
}

/// GPTQ: column-sequential weight quantization with second-order error
/// feedback from the calibration Hessian `H = 2·XᵀX + λI`.
pub fn gptq_quantize_weight(w: &Matrix, calib_inputs: &Matrix, bits: u32) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    if calib_inputs.cols() != w.rows() {
        return Err(Error::Shape(format!(
            "calibration width {} != weight input dim {}",
            calib_inputs.cols(),
            w.rows()
        )));
    }
    let d_in = w.rows();
    let xtx = matmul(&calib_inputs.transpose(), calib_inputs)?;
    let mut h = xtx.scale(2.0);
    let mean_diag: f64 = (0..d_in).map(|i| h.get(i, i)).sum::<f64>() / d_in as f64;
    let damp = 0.01 * mean_diag;
    for i in 0..d_in {
        let v = h.get(i, i) + damp;
        h.set(i, i, v);
    }
    let hinv = spd_inverse(&h)
        .map_err(|e| Error::Numerical(format!("Hessian not invertible after damping: {e}")))?;
    // Upper Cholesky factor U of H⁻¹ (H⁻¹ = Uᵀ·U); U[i, j>i] drives feedback.
    let l = cholesky_lower(&hinv)
        .map_err(|e| Error::Numerical(format!("Cholesky of inverse Hessian failed: {e}")))?;
    let u = l.transpose();

    let lo = -(1i64 << (bits - 1)) as f64;
    let hi = ((1i64 << (bits - 1)) - 1) as f64;
    let scales = column_scales(w, bits, 1.0);
    let mut work = w.clone();
    let mut codes = vec![0i32; w.rows() * w.cols()];
    for i in 0..d_in {
        let dii = u.get(i, i);
        let mut errs = vec![0.0; w.cols()];
        for j in 0..w.cols() {
            let val = work.get(i, j);
            let c = math::round_half_away(val / scales[j]).clamp(lo, hi);
            codes[i * w.cols() + j] = c as i32;
            errs[j] = (val - c * scales[j]) / dii;
        }
        for r in (i + 1)..d_in {
            let uir = u.get(i, r);
            if uir == 0.0 {
                continue;
            }
            let row = work.row_mut(r);
            for j in 0..w.cols() {
                row[j] -= uir * errs[j];
            }
        }
    }
    Ok(QuantizedTensor {
        rows: w.rows(),
        cols: w.cols(),
        bits,
        codes,
        scales,
        zero_points: None,
        group_axis: GroupAxis::Column,
    })
}

// ---------------------------------------------------------------------------
// Fake-quant model execution
// ---------------------------------------------------------------------------

/// The per-layer projection weights subject to quantization, in calibration
/// capture order. Embedding, norms, and lm_head stay high-precision.
fn projection_fields() -> [(&'static str, &'static str); 7] {
    [
        ("wq", "attn_in"),
        ("wk", "attn_in"),
        ("wv", "attn_in"),
        ("wo", "o_in"),
        ("w_up", "ffn_in"),
        ("w_gate", "ffn_in"),
        ("w_down", "down_in"),
    ]
}

/// A checkpoint whose projection weights are already fake-quantized, plus the
/// activation bit width applied at run time.
#[derive(Debug, Clone)]
pub struct FakeQuantModel {
    pub model: ModelCheckpoint,
    pub spec: QuantSpec,
}

impl FakeQuantModel {
    pub fn forward(&self, tokens: &[u32], capture: &[String]) -> Result<model::ForwardTrace> {
        let overlay = QuantOverlay { weight: None, act_bits: Some(self.spec.act_bits) };
        model::forward_with_overlay(&self.model, tokens, capture, Some(&overlay))
    }

    pub fn loss(&self, tokens: &[u32]) -> Result<f64> {
        let trace = self.forward(tokens, &[])?;
        model::cross_entropy(&trace.logits, tokens)
    }
}

/// Concatenate the captured inputs of a projection across calibration
/// sequences into one calibration matrix.
fn concat_captures(parts: &[Matrix]) -> Result<Matrix> {
    let cols = parts[0].cols();
    let rows: usize = parts.iter().map(|p| p.rows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        for i in 0..p.rows() {
            out.row_mut(at).copy_from_slice(p.row(i));
            at += 1;
        }
    }
    Ok(out)
}

/// Quantize every projection weight of `m` per `spec`, returning a model with
/// dequantized weights in place. GPTQ calibrates on the captured inputs of
/// each projection over `calib` sequences.
pub fn fake_quant_weights(
    m: &ModelCheckpoint,
    spec: &QuantSpec,
    calib: &[Vec<u32>],
) -> Result<FakeQuantModel> {
    spec.validate()?;
    let mut out = m.clone();
    match spec.weight_quantizer {
        WeightQuantizer::Rtn => {
            for layer in &mut out.layers {
                for w in [
                    &mut layer.wq,
                    &mut layer.wk,
                    &mut layer.wv,
                    &mut layer.wo,
                    &mut layer.w_up,
                    &mut layer.w_gate,
                    &mut layer.w_down,
                ] {
                    *w = rtn_quantize_weight(w, spec.weight_bits, spec.clip_ratio)?.dequantize();
                }
            }
        }
        WeightQuantizer::Gptq => {
            if calib.is_empty() {
                return Err(Error::Config("GPTQ requires calibration sequences".into()));
            }
            let points = model::projection_input_points(&m.config);
            let mut captures: alloc::collections::BTreeMap<String, Vec<Matrix>> =
                alloc::collections::BTreeMap::new();
            for seq in calib {
                let trace = model::forward(m, seq, &points, None)?;
                for (k, v) in trace.captures {
                    captures.entry(k).or_default().push(v);
                }
            }
            for (li, layer) in out.layers.iter_mut().enumerate() {
                for (field, point) in projection_fields() {
                    let x = concat_captures(&captures[&format!("l{li}.{point}")])?;
                    let w = match field {
                        "wq" => &mut layer.wq,
                        "wk" => &mut layer.wk,
                        "wv" => &mut layer.wv,
                        "wo" => &mut layer.wo,
                        "w_up" => &mut layer.w_up,
                        "w_gate" => &mut layer.w_gate,
                        "w_down" => &mut layer.w_down,
                        _ => unreachable!(),
                    };
                    *w = gptq_quantize_weight(w, &x, spec.weight_bits)?.dequantize();
                }
            }
        }
    }
    Ok(FakeQuantModel { model: out, spec: *spec })
}

/// Forward pass with fake-quantized weights and activations.
pub fn fake_quant_forward(
    m: &ModelCheckpoint,
    tokens: &[u32],
    spec: &QuantSpec,
    calib: &[Vec<u32>],
) -> Result<model::ForwardTrace> {
    fake_quant_weights(m, spec, calib)?.forward(tokens, &[])
}

/// Per-layer quantization error report.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerErrorRow {
    pub layer: usize,
    /// Frobenius error of this layer's output given the exact stream input.
    pub local: f64,
    /// Running worst-case deviation of the fully quantized stream.
    pub accumulated: f64,
}

/// Local and accumulated quantization error per layer.
pub fn layer_quant_error(
    m: &ModelCheckpoint,
    tokens: &[u32],
    spec: &QuantSpec,
    calib: &[Vec<u32>],
) -> Result<Vec<LayerErrorRow>> {
    let fq = fake_quant_weights(m, spec, calib)?;
    let n_layers = m.config.n_layers;
    let mut points = vec![String::from("embed_out")];
    for i in 0..n_layers {
        points.push(format!("l{i}.out"));
    }
    let exact = model::forward(m, tokens, &points, None)?;
    let overlay = QuantOverlay { weight: None, act_bits: Some(spec.act_bits) };

    let mut rows = Vec::with_capacity(n_layers);
    let mut quant_stream = exact.captures["embed_out"].clone();
    let mut acc: f64 = 0.0;
    for li in 0..n_layers {
        let exact_in = if li == 0 {
            &exact.captures["embed_out"]
        } else {
            &exact.captures[&format!("l{}.out", li - 1)]
        };
        let exact_out = &exact.captures[&format!("l{li}.out")];
        let local_out = model::layer_apply(&fq.model, li, exact_in, Some(&overlay))?;
        let local = frobenius_norm(&local_out.sub(exact_out)?);
        quant_stream = model::layer_apply(&fq.model, li, &quant_stream, Some(&overlay))?;
        let dev = frobenius_norm(&quant_stream.sub(exact_out)?);
        acc = acc.max(dev);
        rows.push(LayerErrorRow { layer: li, local, accumulated: acc });
    }
    Ok(rows)
}
