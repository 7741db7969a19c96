//! Hadamard rotation matrices and the fast Walsh–Hadamard transform.
//!
//! Supported sizes are `2^k * m` with `m` in the base table {1, 12, 20, 28}.
//! Composite sizes are assembled as `H_m ⊗ H_{2^k}`. All constructors return
//! orthonormal matrices (scaled by `1/sqrt(dim)`).

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{kronecker, matmul, Matrix};
use crate::math;
use crate::rng::SeededRng;

/// Paley-construction Hadamard matrices for the non-power-of-two base sizes.
/// Each row is a bitmask; bit j set means entry (i, j) is -1.
const H12_ROWS: [u32; 12] = [
    0x00000000, 0x00000b89, 0x00000713, 0x00000e25, 0x00000c4b, 0x00000897,
    0x0000012f, 0x0000025d, 0x000004b9, 0x00000971, 0x000002e3, 0x000005c5,
];
const H20_ROWS: [u32; 20] = [
    0x00000000, 0x0009ea19, 0x0003d433, 0x0007a865, 0x000f50c9, 0x000ea193,
    0x000d4327, 0x000a864f, 0x00050c9f, 0x000a193d, 0x0004327b, 0x000864f5,
    0x0000c9eb, 0x000193d5, 0x000327a9, 0x00064f51, 0x000c9ea1, 0x00093d43,
    0x00027a87, 0x0004f50d,
];
const H28_ROWS: [u32; 28] = [
    0x00000002, 0x0aaaaaab, 0x030ff0c8, 0x09a55a6e, 0x0c3fc320, 0x069569ba,
    0x00ff0c8c, 0x0a55a6e6, 0x03fc3230, 0x09569b9a, 0x0ff0c8c0, 0x055a6e6a,
    0x0fc3230c, 0x0569b9a6, 0x0f0c8c3c, 0x05a6e696, 0x0c3230fc, 0x069b9a56,
    0x00c8c3fc, 0x0a6e6956, 0x03230ff0, 0x09b9a55a, 0x0c8c3fc0, 0x06e6956a,
    0x0230ff0c, 0x0b9a55a6, 0x08c3fc30, 0x0e69569a,
];

fn base_table(m: usize) -> Option<&'static [u32]> {
    match m {
        12 => Some(&H12_ROWS),
        20 => Some(&H20_ROWS),
        28 => Some(&H28_ROWS),
        _ => None,
    }
}

/// Kind of rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RotationKind {
    PlainHadamard,
    RandomizedHadamard,
    Explicit,
}

/// An orthogonal rotation matrix, reproducible from (dim, seed, kind) for the
/// Hadamard kinds. `Explicit` carries its matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix {
    pub dim: usize,
    pub seed: u64,
    pub kind: RotationKind,
    materialized: Option<Matrix>,
}

impl RotationMatrix {
    pub fn explicit(q: Matrix) -> Result<Self> {
        if q.rows() != q.cols() {
            return Err(Error::Shape("rotation matrix must be square".into()));
        }
        Ok(RotationMatrix { dim: q.rows(), seed: 0, kind: RotationKind::Explicit, materialized: Some(q) })
    }

    /// Dense orthonormal form of the rotation.
    pub fn materialize(&self) -> Result<Matrix> {
        if let Some(m) = &self.materialized {
            return Ok(m.clone());
        }
        let h = dense_hadamard(self.dim)?;
        match self.kind {
            RotationKind::PlainHadamard => Ok(h),
            RotationKind::RandomizedHadamard => {
                let mut q = h;
                let signs = sign_diagonal(self.dim, self.seed);
                for i in 0..self.dim {
                    let s = signs[i];
                    for v in q.row_mut(i) {
                        *v *= s;
                    }
                }
                Ok(q)
            }
            RotationKind::Explicit => unreachable!("explicit always materialized"),
        }
    }

    /// Transpose (= inverse, by orthogonality).
    pub fn transposed(&self) -> Result<Self> {
        RotationMatrix::explicit(self.materialize()?.transpose())
    }

    /// True when row rotation can go through the FWHT butterfly.
    pub fn has_fast_path(&self) -> bool {
        self.dim.is_power_of_two()
            && matches!(self.kind, RotationKind::PlainHadamard | RotationKind::RandomizedHadamard)
    }
}

fn sign_diagonal(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::derive(seed, 0x5147);
    (0..dim).map(|_| rng.sign()).collect()
}

fn decompose(dim: usize) -> Result<(usize, usize)> {
    if dim == 0 {
        return Err(Error::Construction("dimension must be positive".into()));
    }
    if dim.is_power_of_two() {
        return Ok((1, dim));
    }
    // Smallest base containing the odd part, remainder a power of two.
    let mut m = dim;
    while m % 2 == 0 {
        m /= 2;
    }
    let odd = m;
    while m <= dim {
        if base_table(m).is_some() && dim % m == 0 && (dim / m).is_power_of_two() {
            return Ok((m, dim / m));
        }
        m *= 2;
    }
    Err(Error::Construction(format!(
        "no Hadamard construction for dim {dim}: odd factor {odd} not reachable from base table {{1, 12, 20, 28}}"
    )))
}

fn base_matrix(m: usize) -> Matrix {
    let rows = base_table(m).expect("caller validated base size");
    let mut h = Matrix::zeros(m, m);
    for (i, &mask) in rows.iter().enumerate() {
        for j in 0..m {
            h.set(i, j, if mask >> j & 1 == 1 { -1.0 } else { 1.0 });
        }
    }
    h
}

/// Unnormalized ±1 Sylvester matrix of power-of-two size.
fn sylvester(pow: usize) -> Matrix {
    let mut h = Matrix::from_vec(1, 1, alloc::vec![1.0]).unwrap();
    let h2 = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, -1.0]]).unwrap();
    let mut size = 1;
    while size < pow {
        h = kronecker(&h2, &h);
        size *= 2;
    }
    h
}

fn dense_hadamard(dim: usize) -> Result<Matrix> {
    let (m, pow) = decompose(dim)?;
    let h = if m == 1 {
        sylvester(pow)
    } else if pow == 1 {
        base_matrix(m)
    } else {
        kronecker(&base_matrix(m), &sylvester(pow))
    };
    Ok(h.scale(1.0 / math::sqrt(dim as f64)))
}

/// Orthonormal Hadamard matrix of the given dimension.
pub fn hadamard_matrix(dim: usize) -> Result<RotationMatrix> {
    decompose(dim)?;
    Ok(RotationMatrix { dim, seed: 0, kind: RotationKind::PlainHadamard, materialized: None })
}

/// Seeded random-sign diagonal times the orthonormal Hadamard matrix.
pub fn randomized_hadamard(dim: usize, seed: u64) -> Result<RotationMatrix> {
    decompose(dim)?;
    Ok(RotationMatrix { dim, seed, kind: RotationKind::RandomizedHadamard, materialized: None })
}

/// In-place fast Walsh–Hadamard transform; `log2(n)` butterfly passes.
pub fn fwht_in_place(x: &mut [f64], normalize: bool) -> Result<()> {
    let n = x.len();
    if !n.is_power_of_two() {
        return Err(Error::Shape(format!("fwht length {n} is not a power of two")));
    }
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(h * 2) {
            for i in block..block + h {
                let a = x[i];
                let b = x[i + h];
                x[i] = a + b;
                x[i + h] = a - b;
            }
        }
        h *= 2;
    }
    if normalize {
        let inv = 1.0 / math::sqrt(n as f64);
        for v in x.iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}

/// Out-of-place FWHT.
pub fn fwht(x: &[f64], normalize: bool) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    fwht_in_place(&mut out, normalize)?;
    Ok(out)
}

/// Transform every row of `x` by `q`, using the FWHT fast path when `q` is a
/// (randomized) power-of-two Hadamard and a dense multiply otherwise.
pub fn rotate_rows(x: &Matrix, q: &RotationMatrix) -> Result<Matrix> {
    if x.cols() != q.dim {
        return Err(Error::Shape(format!(
            "rotate_rows: {} columns vs rotation dim {}",
            x.cols(),
            q.dim
        )));
    }
    if q.has_fast_path() {
        let mut out = x.clone();
        let signs = match q.kind {
            RotationKind::RandomizedHadamard => Some(sign_diagonal(q.dim, q.seed)),
            _ => None,
        };
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            // Q = D·H applied on the right: x·Q = x·D·H (D diagonal).
            if let Some(s) = &signs {
                for (v, d) in row.iter_mut().zip(s) {
                    *v *= d;
                }
            }
            fwht_in_place(row, true)?;
        }
        Ok(out)
    } else {
        matmul(x, &q.materialize()?)
    }
}
