//! Diagnostics: kurtosis, activation capture summaries, and the truncated-SVD
//! approximation-error experiment comparing the LAR and LBR adapter targets.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hadamard::RotationMatrix;
use crate::linalg::{frobenius_norm, matmul, svd, Matrix};
use crate::math;
use crate::model::{forward, projection_input_points, ModelCheckpoint};

pub const KURTOSIS_EPS: f64 = 1e-6;

/// Fourth standardized moment with an epsilon-guarded denominator:
/// `mean((x-μ)⁴) / (σ⁴ + ε)` with population μ, σ. Gaussian data → ≈3.
/// With `normalized = false` the fourth-moment sum is not averaged.
pub fn kurtosis(values: &[f64], epsilon: f64, normalized: bool) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Input("kurtosis needs at least 2 values".into()));
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| math::powi(v - mu, 4)).sum::<f64>();
    let num = if normalized { m4 / n } else { m4 };
    Ok(num / (var * var + epsilon))
}

/// Summary statistics for one captured activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub point: String,
    pub per_channel_max_abs: Vec<f64>,
    pub kurtosis: f64,
    pub token_count: usize,
}

/// Kurtosis and per-channel max-abs profile for each requested capture point.
pub fn capture_stats(
    m: &ModelCheckpoint,
    tokens: &[u32],
    points: &[String],
) -> Result<Vec<ActivationStats>> {
    let trace = forward(m, tokens, points, None)?;
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let x = trace
            .captures
            .get(p)
            .ok_or_else(|| Error::Config(format!("capture point '{p}' missing")))?;
        let mut per_channel = alloc::vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (j, v) in x.row(i).iter().enumerate() {
                let a = math::abs(*v);
                if a > per_channel[j] {
                    per_channel[j] = a;
                }
            }
        }
        out.push(ActivationStats {
            point: p.clone(),
            per_channel_max_abs: per_channel,
            kurtosis: kurtosis(x.data(), KURTOSIS_EPS, true)?,
            token_count: x.rows(),
        });
    }
    Ok(out)
}

/// Mean kurtosis over all projection-input activations across sequences
/// (the "average kurtosis" training-dynamics statistic).
pub fn mean_activation_kurtosis(m: &ModelCheckpoint, sequences: &[Vec<u32>]) -> Result<f64> {
    let points = projection_input_points(&m.config);
    let mut sum = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        for s in capture_stats(m, seq, &points)? {
            sum += s.kurtosis;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Input("no sequences given".into()));
    }
    Ok(sum / count as f64)
}

/// Which side of the residual stream a weight sits on; fixes the BBR rewrite
/// applied in the approximation experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSide {
    /// Stream-consuming (wq, wk, wv, w_up, w_gate): rewrite is `Qᵀ·W`.
    Left,
    /// Stream-producing (wo, w_down): rewrite is `W·Q`.
    Right,
}

impl WeightSide {
    pub fn rewrite(&self, w: &Matrix, q: &Matrix) -> Result<Matrix> {
        match self {
            WeightSide::Left => matmul(&q.transpose(), w),
            WeightSide::Right => matmul(w, q),
        }
    }

    pub fn inverse_rewrite(&self, w: &Matrix, q: &Matrix) -> Result<Matrix> {
        match self {
            WeightSide::Left => matmul(q, w),
            WeightSide::Right => matmul(w, &q.transpose()),
        }
    }
}

/// One row of the approximation-error table.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdErrorRow {
    pub scheme: &'static str,
    pub rank: usize,
    pub error: f64,
}

/// Rank-`r` truncation error `‖O − A·B‖F` with `A = U√S`, `B = √S·Vᵀ`, for
/// both adapter targets: `O_LAR = W_ft − rewrite(W0)` and
/// `O_LBR = inverse_rewrite(W_ft) − W0`.
pub fn svd_approx_experiment(
    w0: &Matrix,
    w_ft: &Matrix,
    q: &RotationMatrix,
    ranks: &[usize],
    side: WeightSide,
) -> Result<Vec<SvdErrorRow>> {
    if w0.rows() != w_ft.rows() || w0.cols() != w_ft.cols() {
        return Err(Error::Shape("w0 and w_ft shapes differ".into()));
    }
    let qm = q.materialize()?;
    let o_lar = w_ft.sub(&side.rewrite(w0, &qm)?)?;
    let o_lbr = side.inverse_rewrite(w_ft, &qm)?.sub(w0)?;
    let mut rows = Vec::new();
    for (scheme, target) in [("lar", &o_lar), ("lbr", &o_lbr)] {
        let (u, s, v) = svd(target)?;
        for &r in ranks {
            let k = r.min(s.len());
            // A·B from the top-k spectrum
            let mut a = Matrix::zeros(u.rows(), k.max(1));
            let mut b = Matrix::zeros(k.max(1), v.rows());
            for c in 0..k {
                let root = math::sqrt(s[c]);
                for i in 0..u.rows() {
                    a.set(i, c, u.get(i, c) * root);
                }
                for j in 0..v.rows() {
                    b.set(c, j, root * v.get(j, c));
                }
            }
            let approx = matmul(&a, &b)?;
            let error = frobenius_norm(&target.sub(&approx)?);
            rows.push(SvdErrorRow { scheme, rank: r, error });
        }
    }
    Ok(rows)
}

/// Independent check used by tests and the experiment runner: the rank-r
/// truncation error must equal the tail-spectrum energy `sqrt(Σ_{i>r} sᵢ²)`.
pub fn tail_energy(singular_values: &[f64], rank: usize) -> f64 {
    math::sqrt(singular_values.iter().skip(rank).map(|s| s * s).sum())
}
