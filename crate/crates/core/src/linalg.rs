//! Minimal dense linear algebra: row-major `f64` matrices, products, norms,
//! SVD, Kronecker product.
//!
//! Conventions fixed for the whole crate: row-major storage, activations are
//! row vectors, `y = x · W` with `W` shaped `(d_in, d_out)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Dense 2-D real matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Shape("no rows".into()));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        for v in &mut m.data {
            *v *= s;
        }
        m
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "add {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut m = self.clone();
        for (a, b) in m.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(m)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "sub {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut m = self.clone();
        for (a, b) in m.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(m)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| {
            let a = math::abs(v);
            if a > m {
                a
            } else {
                m
            }
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j loop order keeps the inner loop contiguous in both b and out.
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// Frobenius norm: sqrt of the sum of squared entries.
pub fn frobenius_norm(a: &Matrix) -> f64 {
    math::sqrt(a.data.iter().map(|v| v * v).sum())
}

/// Kronecker product: block (i,j) of the result is `a[i,j] * b`.
pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows * b.rows, a.cols * b.cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a.data[i * a.cols + j];
            for p in 0..b.rows {
                for q in 0..b.cols {
                    out.data[(i * b.rows + p) * out.cols + j * b.cols + q] =
                        aij * b.data[p * b.cols + q];
                }
            }
        }
    }
    out
}

const SVD_MAX_SWEEPS: usize = 64;
const SVD_SIDE_CAP: usize = 4096;

/// Singular value decomposition `a = U · diag(S) · Vᵀ` via one-sided Jacobi.
///
/// `U` is `m×n`, `S` length `n`, `V` is `n×n` when `m >= n`; for wide
/// matrices the factorization of the transpose is swapped back. Singular
/// values are non-negative and descending; `U`, `V` have orthonormal columns.
pub fn svd(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if !a.is_finite() {
        return Err(Error::Numerical("svd input not finite".into()));
    }
    if a.rows > SVD_SIDE_CAP || a.cols > SVD_SIDE_CAP {
        return Err(Error::Numerical(format!(
            "svd sized for small matrices, got {}x{}",
            a.rows, a.cols
        )));
    }
    if a.rows >= a.cols {
        svd_tall(a)
    } else {
        let (u, s, v) = svd_tall(&a.transpose())?;
        Ok((v, s, u))
    }
}

fn svd_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = (a.rows, a.cols);
    // Work on columns of g; v accumulates the right rotations.
    let mut g = a.clone();
    let mut v = Matrix::identity(n);
    let eps = 1e-15;

    let mut converged = false;
    let mut sweeps = 0;
    while !converged && sweeps < SVD_MAX_SWEEPS {
        converged = true;
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let gp = g.data[i * n + p];
                    let gq = g.data[i * n + q];
                    app += gp * gp;
                    aqq += gq * gq;
                    apq += gp * gq;
                }
                if math::abs(apq) <= eps * math::sqrt(app * aqq) {
                    continue;
                }
                converged = false;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + math::sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + math::sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / math::sqrt(1.0 + t * t);
                let s = c * t;
                for i in 0..m {
                    let gp = g.data[i * n + p];
                    let gq = g.data[i * n + q];
                    g.data[i * n + p] = c * gp - s * gq;
                    g.data[i * n + q] = s * gp + c * gq;
                }
                for i in 0..n {
                    let vp = v.data[i * n + p];
                    let vq = v.data[i * n + q];
                    v.data[i * n + p] = c * vp - s * vq;
                    v.data[i * n + q] = s * vp + c * vq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "svd did not converge after {sweeps} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut sigma = vec![0.0; n];
    for j in 0..n {
        let mut sum = 0.0;
        for i in 0..m {
            sum += g.data[i * n + j] * g.data[i * n + j];
        }
        sigma[j] = math::sqrt(sum);
    }
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap());

    let mut u = Matrix::zeros(m, n);
    let mut s_out = vec![0.0; n];
    let mut v_out = Matrix::zeros(n, n);
    let tiny = 1e-300;
    for (dst, &src) in order.iter().enumerate() {
        s_out[dst] = sigma[src];
        for i in 0..n {
            v_out.data[i * n + dst] = v.data[i * n + src];
        }
        if sigma[src] > tiny {
            for i in 0..m {
                u.data[i * n + dst] = g.data[i * n + src] / sigma[src];
            }
        }
    }
    // Null columns of u (zero singular values) are completed to an
    // orthonormal set so U keeps orthonormal columns.
    for j in 0..n {
        if s_out[j] > tiny {
            continue;
        }
        for cand in 0..m {
            let mut col = vec![0.0; m];
            col[cand] = 1.0;
            for jj in 0..n {
                if jj == j || s_out[jj] <= tiny && jj > j {
                    continue;
                }
                let mut dot = 0.0;
                for i in 0..m {
                    dot += col[i] * u.data[i * n + jj];
                }
                for i in 0..m {
                    col[i] -= dot * u.data[i * n + jj];
                }
            }
            let nrm = math::sqrt(col.iter().map(|x| x * x).sum());
            if nrm > 1e-6 {
                for i in 0..m {
                    u.data[i * n + j] = col[i] / nrm;
                }
                break;
            }
        }
    }
    Ok((u, s_out, v_out))
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_lower(a: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols {
        return Err(Error::Shape("cholesky needs a square matrix".into()));
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "cholesky pivot {sum:.3e} at row {i}"
                    )));
                }
                l.set(i, j, math::sqrt(sum));
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky_lower(a)?;
    let n = a.rows;
    let mut inv = Matrix::zeros(n, n);
    // Solve L Lᵀ x = e_j column by column.
    for j in 0..n {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut sum = if i == j { 1.0 } else { 0.0 };
            for k in 0..i {
                sum -= l.get(i, k) * y[k];
            }
            y[i] = sum / l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in (i + 1)..n {
                sum -= l.get(k, i) * inv.get(k, j);
            }
            inv.set(i, j, sum / l.get(i, i));
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.normal() * 0.5).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut rng = SeededRng::new(1);
        let x = random_matrix(&mut rng, 3, 5);
        let i = Matrix::identity(3);
        assert_eq!(matmul(&i, &x).unwrap(), x);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(7);
        let a = random_matrix(&mut rng, 8, 8);
        let b = random_matrix(&mut rng, 8, 8);
        let c = matmul(&a, &b).unwrap();
        // brute-force triple-loop oracle
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for k in 0..8 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
        assert!((frobenius_norm(&Matrix::identity(3)) - math::sqrt(3.0)).abs() < 1e-15);
        let m = Matrix::from_rows(&[&[3.0, 4.0]]).unwrap();
        assert!((frobenius_norm(&m) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn kronecker_h2_recursion() {
        let h2 = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, -1.0]]).unwrap();
        let h4 = kronecker(&h2, &h2);
        let expect = Matrix::from_rows(&[
            &[1.0, 1.0, 1.0, 1.0],
            &[1.0, -1.0, 1.0, -1.0],
            &[1.0, 1.0, -1.0, -1.0],
            &[1.0, -1.0, -1.0, 1.0],
        ])
        .unwrap();
        assert_eq!(h4, expect);
    }

    #[test]
    fn kronecker_identity_and_norm() {
        let mut rng = SeededRng::new(3);
        let x = random_matrix(&mut rng, 3, 4);
        assert_eq!(kronecker(&Matrix::identity(1), &x), x);
        let a = random_matrix(&mut rng, 2, 3);
        let k = kronecker(&a, &x);
        let prod = frobenius_norm(&a) * frobenius_norm(&x);
        assert!((frobenius_norm(&k) - prod).abs() < 1e-10);
    }

    #[test]
    fn kronecker_mixed_product() {
        let mut rng = SeededRng::new(11);
        let a = random_matrix(&mut rng, 2, 3);
        let b = random_matrix(&mut rng, 3, 2);
        let c = random_matrix(&mut rng, 3, 2);
        let d = random_matrix(&mut rng, 2, 4);
        let lhs = matmul(&kronecker(&a, &b), &kronecker(&c, &d)).unwrap();
        let rhs = kronecker(&matmul(&a, &c).unwrap(), &matmul(&b, &d).unwrap());
        assert!(frobenius_norm(&lhs.sub(&rhs).unwrap()) < 1e-10);
    }

    fn check_svd(a: &Matrix) {
        let (u, s, v) = svd(a).unwrap();
        let k = s.len();
        let mut us = u.clone();
        for i in 0..us.rows() {
            for j in 0..k {
                let val = us.get(i, j) * s[j];
                us.set(i, j, val);
            }
        }
        let recon = matmul(&us, &v.transpose()).unwrap();
        let scale = frobenius_norm(a).max(1.0);
        assert!(frobenius_norm(&recon.sub(a).unwrap()) < 1e-8 * scale);
        for j in 0..k {
            assert!(s[j] >= 0.0);
            if j + 1 < k {
                assert!(s[j] >= s[j + 1]);
            }
        }
        // orthonormal columns
        let utu = matmul(&u.transpose(), &u).unwrap();
        let vtv = matmul(&v.transpose(), &v).unwrap();
        assert!(frobenius_norm(&utu.sub(&Matrix::identity(k)).unwrap()) < 1e-8);
        assert!(frobenius_norm(&vtv.sub(&Matrix::identity(v.cols())).unwrap()) < 1e-8);
    }

    #[test]
    fn svd_diagonal() {
        let a = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]).unwrap();
        let (_, s, _) = svd(&a).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);
        check_svd(&a);
    }

    #[test]
    fn svd_rank_one() {
        let u = Matrix::from_rows(&[&[1.0], &[2.0], &[-1.0]]).unwrap();
        let v = Matrix::from_rows(&[&[0.5, -0.5, 1.0, 2.0]]).unwrap();
        let a = matmul(&u, &v).unwrap();
        let (_, s, _) = svd(&a).unwrap();
        assert_eq!(s.iter().filter(|&&x| x > 1e-10).count(), 1);
        check_svd(&a);
    }

    #[test]
    fn svd_random_rect() {
        let mut rng = SeededRng::new(42);
        check_svd(&random_matrix(&mut rng, 16, 12));
        check_svd(&random_matrix(&mut rng, 12, 16));
    }

    #[test]
    fn svd_invariant_under_orthogonal() {
        let mut rng = SeededRng::new(5);
        let a = random_matrix(&mut rng, 8, 8);
        let q = crate::hadamard::hadamard_matrix(8).unwrap();
        let qm = q.materialize().unwrap();
        let (_, s0, _) = svd(&a).unwrap();
        let (_, s1, _) = svd(&matmul(&qm, &a).unwrap()).unwrap();
        let (_, s2, _) = svd(&matmul(&a, &qm).unwrap()).unwrap();
        for i in 0..8 {
            assert!((s0[i] - s1[i]).abs() < 1e-9);
            assert!((s0[i] - s2[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn cholesky_and_inverse() {
        let mut rng = SeededRng::new(9);
        let x = random_matrix(&mut rng, 12, 6);
        let mut h = matmul(&x.transpose(), &x).unwrap();
        for i in 0..6 {
            let v = h.get(i, i) + 0.5;
            h.set(i, i, v);
        }
        let l = cholesky_lower(&h).unwrap();
        let llt = matmul(&l, &l.transpose()).unwrap();
        assert!(frobenius_norm(&llt.sub(&h).unwrap()) < 1e-10);
        let inv = spd_inverse(&h).unwrap();
        let prod = matmul(&h, &inv).unwrap();
        assert!(frobenius_norm(&prod.sub(&Matrix::identity(6)).unwrap()) < 1e-9);
    }
}
