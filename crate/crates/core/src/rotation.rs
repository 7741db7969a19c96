//! Computational-invariance rewrites: RMSNorm fusion, between-block rotation
//! (BBR, R1), FFN in-block online rotation (IBR, R2), optional head-wise
//! attention rotation (R3), and invariance verification.
//!
//! Under the crate's row-vector convention (`y = x·W`), stream-consuming
//! "left-side" weights (wq, wk, wv, w_up, w_gate, lm_head) become `Qᵀ·W` and
//! stream-producing "right-side" weights (wo, w_down) become `W·Q`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hadamard::{randomized_hadamard, rotate_rows, RotationMatrix};
use crate::linalg::{matmul, Matrix};
use crate::model::{forward, ModelCheckpoint};
use crate::rng::SeededRng;

/// The rotation configuration applied to a model. R1 is shared across all
/// layers; residual-stream invariance requires it.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationSet {
    pub r1: Option<RotationMatrix>,
    pub r2_enabled: bool,
    pub r3: Option<RotationMatrix>,
    pub seed: u64,
}

impl RotationSet {
    pub fn empty(seed: u64) -> Self {
        RotationSet { r1: None, r2_enabled: false, r3: None, seed }
    }
}

/// Which rotations to apply; reproducible from the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct RotationPlan {
    pub r1: bool,
    pub r2: bool,
    pub r3: bool,
    pub seed: u64,
}

impl Default for RotationPlan {
    fn default() -> Self {
        RotationPlan { r1: true, r2: true, r3: false, seed: 0 }
    }
}

/// R3 draws from a derived stream so R1 and R3 stay independent.
pub fn r3_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(3)
}

/// Absorb every RMSNorm scale vector into the rows of the weights consuming
/// that norm's output; all scale vectors become ones. Logits are unchanged.
pub fn fuse_norms(mut m: ModelCheckpoint) -> Result<ModelCheckpoint> {
    if m.norm_fused {
        return Err(Error::State("norms already fused".into()));
    }
    fn absorb(scale: &mut [f64], consumers: &mut [&mut Matrix]) {
        for w in consumers.iter_mut() {
            for (i, &s) in scale.iter().enumerate() {
                for v in w.row_mut(i) {
                    *v *= s;
                }
            }
        }
        for s in scale.iter_mut() {
            *s = 1.0;
        }
    }
    for layer in &mut m.layers {
        absorb(&mut layer.attn_norm, &mut [&mut layer.wq, &mut layer.wk, &mut layer.wv]);
        absorb(&mut layer.ffn_norm, &mut [&mut layer.w_up, &mut layer.w_gate]);
    }
    absorb(&mut m.final_norm, &mut [&mut m.lm_head]);
    m.norm_fused = true;
    Ok(m)
}

/// Between-block rotation: rewrite every residual-stream-facing weight by the
/// shared orthogonal matrix Q. Requires fused norms.
pub fn apply_bbr(mut m: ModelCheckpoint, q: &RotationMatrix) -> Result<ModelCheckpoint> {
    if !m.norm_fused {
        return Err(Error::State("BBR requires fused norms".into()));
    }
    if m.rotated.as_ref().map_or(false, |r| r.r1.is_some()) {
        return Err(Error::State("BBR already applied".into()));
    }
    if q.dim != m.config.d_model {
        return Err(Error::Shape(format!(
            "rotation dim {} != d_model {}",
            q.dim, m.config.d_model
        )));
    }
    let qm = q.materialize()?;
    let qt = qm.transpose();
    m.embedding = rotate_rows(&m.embedding, q)?;
    m.pos_table = rotate_rows(&m.pos_table, q)?;
    for layer in &mut m.layers {
        layer.wq = matmul(&qt, &layer.wq)?;
        layer.wk = matmul(&qt, &layer.wk)?;
        layer.wv = matmul(&qt, &layer.wv)?;
        layer.wo = rotate_rows(&layer.wo, q)?;
        layer.w_up = matmul(&qt, &layer.w_up)?;
        layer.w_gate = matmul(&qt, &layer.w_gate)?;
        layer.w_down = rotate_rows(&layer.w_down, q)?;
    }
    m.lm_head = matmul(&qt, &m.lm_head)?;
    let seed = q.seed;
    let set = m.rotated.get_or_insert_with(|| RotationSet::empty(seed));
    set.r1 = Some(q.clone());
    Ok(m)
}

/// FFN in-block rotation: the forward pass applies an online FWHT to the
/// SwiGLU output; w_down is rewritten by the inverse so logits are unchanged.
pub fn apply_ibr_ffn(mut m: ModelCheckpoint) -> Result<ModelCheckpoint> {
    if !m.config.d_ffn.is_power_of_two() {
        return Err(Error::Construction(format!(
            "IBR needs power-of-two d_ffn, got {}",
            m.config.d_ffn
        )));
    }
    if m.rotated.as_ref().map_or(false, |r| r.r2_enabled) {
        return Err(Error::State("FFN IBR already enabled".into()));
    }
    // Hᵀ·w_down: the normalized Sylvester Hadamard is symmetric, so this is
    // an FWHT down each column.
    for layer in &mut m.layers {
        let mut wt = layer.w_down.transpose();
        for i in 0..wt.rows() {
            crate::hadamard::fwht_in_place(wt.row_mut(i), true)?;
        }
        layer.w_down = wt.transpose();
    }
    let set = m.rotated.get_or_insert_with(|| RotationSet::empty(0));
    set.r2_enabled = true;
    Ok(m)
}

/// Head-wise attention rotation: per head, value-projection columns pick up
/// Q3 and the matching output-projection rows pick up Q3ᵀ.
pub fn apply_ibr_attn(mut m: ModelCheckpoint, q_head: &RotationMatrix) -> Result<ModelCheckpoint> {
    let hd = m.config.head_dim();
    if q_head.dim != hd {
        return Err(Error::Shape(format!(
            "head rotation dim {} != head_dim {hd}",
            q_head.dim
        )));
    }
    if m.rotated.as_ref().map_or(false, |r| r.r3.is_some()) {
        return Err(Error::State("attention IBR already applied".into()));
    }
    let q3 = q_head.materialize()?;
    let q3t = q3.transpose();
    let heads = m.config.n_heads;
    let dm = m.config.d_model;
    for layer in &mut m.layers {
        // wv columns, per head block: block ← block · Q3
        let mut wv = Matrix::zeros(dm, dm);
        let mut wo = Matrix::zeros(dm, dm);
        for h in 0..heads {
            let mut vblk = Matrix::zeros(dm, hd);
            for i in 0..dm {
                for j in 0..hd {
                    vblk.set(i, j, layer.wv.get(i, h * hd + j));
                }
            }
            let vrot = matmul(&vblk, &q3)?;
            for i in 0..dm {
                for j in 0..hd {
                    wv.set(i, h * hd + j, vrot.get(i, j));
                }
            }
            let mut oblk = Matrix::zeros(hd, dm);
            for i in 0..hd {
                oblk.row_mut(i).copy_from_slice(layer.wo.row(h * hd + i));
            }
            let orot = matmul(&q3t, &oblk)?;
            for i in 0..hd {
                wo.row_mut(h * hd + i).copy_from_slice(orot.row(i));
            }
        }
        layer.wv = wv;
        layer.wo = wo;
    }
    let set = m.rotated.get_or_insert_with(|| RotationSet::empty(q_head.seed));
    set.r3 = Some(q_head.clone());
    Ok(m)
}

/// Fuse then apply the planned rotations in the fixed order
/// fuse → BBR → FFN IBR → attention IBR.
pub fn apply_rotation_plan(m: ModelCheckpoint, plan: &RotationPlan) -> Result<ModelCheckpoint> {
    let mut m = if m.norm_fused { m } else { fuse_norms(m)? };
    if plan.r1 {
        let q = randomized_hadamard(m.config.d_model, plan.seed)?;
        m = apply_bbr(m, &q)?;
    }
    if plan.r2 {
        m = apply_ibr_ffn(m)?;
    }
    if plan.r3 {
        let q3 = randomized_hadamard(m.config.head_dim(), r3_seed(plan.seed))?;
        m = apply_ibr_attn(m, &q3)?;
    }
    if let Some(set) = &mut m.rotated {
        set.seed = plan.seed;
    }
    Ok(m)
}

/// Result of an invariance check between two checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceReport {
    pub trials: usize,
    pub tol: f64,
    pub max_deviation: f64,
    pub pass: bool,
}

/// Compare logits of two checkpoints on seeded random token sequences.
pub fn verify_invariance(
    original: &ModelCheckpoint,
    rewritten: &ModelCheckpoint,
    trials: usize,
    tol: f64,
) -> Result<InvarianceReport> {
    if original.config.d_model != rewritten.config.d_model
        || original.config.n_layers != rewritten.config.n_layers
        || original.config.vocab != rewritten.config.vocab
        || original.config.seq_len != rewritten.config.seq_len
    {
        return Err(Error::Config("checkpoints have different architectures".into()));
    }
    let mut rng = SeededRng::derive(0x1a11, 7);
    let len = original.config.seq_len.min(32);
    let mut max_dev: f64 = 0.0;
    for _ in 0..trials {
        let tokens: Vec<u32> =
            (0..len).map(|_| rng.below(original.config.vocab) as u32).collect();
        let a = forward(original, &tokens, &[], None)?;
        let b = forward(rewritten, &tokens, &[], None)?;
        let dev = a.logits.sub(&b.logits)?.max_abs();
        if dev > max_dev {
            max_dev = dev;
        }
    }
    Ok(InvarianceReport { trials, tol, max_deviation: max_dev, pass: max_dev <= tol })
}
