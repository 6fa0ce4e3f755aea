//! Dense row-major matrices and the handful of factorizations the engine
//! needs: a one-sided Jacobi SVD, power-iteration spectral norm, Cholesky for
//! the ADMM linear system and LU for active-set polishing.
//!
//! Everything is computed in `f64` and is deterministic: identical inputs give
//! bit-identical outputs.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ * y`.
    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, self.row(i), &mut out);
            }
        }
        out
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), dst);
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::invalid("shape mismatch in matrix addition"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(DenseMatrix { data, ..*self })
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::invalid("shape mismatch in matrix subtraction"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseMatrix { data, ..*self })
    }

    pub fn scale(&self, alpha: f64) -> DenseMatrix {
        DenseMatrix {
            data: self.data.iter().map(|x| alpha * x).collect(),
            ..*self
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        norm_inf(&self.data)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Top-`r` singular triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// Left singular vectors, `rows x r`.
    pub u: DenseMatrix,
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// Right singular vectors, `cols x r`.
    pub v: DenseMatrix,
}

impl SvdResult {
    /// `U diag(s) Vᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, r) = self.u.shape();
        let n = self.v.rows();
        let mut out = DenseMatrix::zeros(m, n);
        for i in 0..m {
            for k in 0..r {
                let coef = self.u[(i, k)] * self.singular_values[k];
                if coef == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += coef * self.v[(j, k)];
                }
            }
        }
        out
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;
const JACOBI_TOL: f64 = 1e-14;

/// Truncated SVD by one-sided (Hestenes) Jacobi rotations on whichever of
/// `W` or `Wᵀ` has fewer columns.
///
/// Each column of `U` is signed so that its entry of largest magnitude is
/// positive (first such entry on ties); `V` is flipped along with it.
pub fn truncated_svd(w: &DenseMatrix, r: usize) -> Result<SvdResult> {
    let (m, n) = w.shape();
    let k = m.min(n);
    if r == 0 || r > k {
        return Err(Error::invalid(format!(
            "rank {r} outside 1..={k} for a {m}x{n} matrix"
        )));
    }
    if !w.is_finite() {
        return Err(Error::invalid("matrix has non-finite entries"));
    }

    // Work on the k columns of either W (m >= n) or Wᵀ (m < n).
    let transposed = m < n;
    let len = if transposed { n } else { m };
    let mut cols: Vec<Vec<f64>> = if transposed {
        (0..m).map(|i| w.row(i).to_vec()).collect()
    } else {
        (0..n).map(|j| w.column(j)).collect()
    };
    let mut rot: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = rot.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..k).collect();
    // Stable: equal singular values keep their column order.
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let sigma_max = sigma[order[0]];
    let zero_tol = sigma_max * (len.max(k) as f64) * f64::EPSILON;

    // `normalized` come from the rotated data, `orth` from the accumulated
    // rotations; which one is U depends on whether we transposed.
    let mut normalized: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut valid: Vec<bool> = Vec::with_capacity(r);
    let mut orth: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut values = Vec::with_capacity(r);
    for &j in order.iter().take(r) {
        let s = sigma[j];
        values.push(s);
        if s > zero_tol && s > 0.0 {
            normalized.push(cols[j].iter().map(|x| x / s).collect());
            valid.push(true);
        } else {
            normalized.push(vec![0.0; len]);
            valid.push(false);
        }
        orth.push(rot[j].clone());
    }
    complete_orthonormal(&mut normalized, &valid);

    let (mut u_cols, mut v_cols) = if transposed {
        (orth, normalized)
    } else {
        (normalized, orth)
    };
    for (uc, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let mut best = 0;
        for (i, x) in uc.iter().enumerate() {
            if x.abs() > uc[best].abs() {
                best = i;
            }
        }
        if uc[best] < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(SvdResult {
        u: columns_to_matrix(&u_cols, m),
        singular_values: values,
        v: columns_to_matrix(&v_cols, n),
    })
}

#[inline]
fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            out[(i, j)] = x;
        }
    }
    out
}

/// Replaces every column with `valid[j] == false` by a unit vector orthogonal
/// to all other columns, drawn from the standard basis by Gram-Schmidt.
fn complete_orthonormal(cols: &mut [Vec<f64>], valid: &[bool]) {
    if valid.iter().all(|&v| v) {
        return;
    }
    let len = cols[0].len();
    let mut candidate = 0;
    for j in 0..cols.len() {
        if valid[j] {
            continue;
        }
        while candidate < len {
            let mut e = vec![0.0; len];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of classical Gram-Schmidt.
            for _ in 0..2 {
                for (i, c) in cols.iter().enumerate() {
                    if i != j && (valid[i] || i < j) {
                        let proj = dot(c, &e);
                        axpy(-proj, c, &mut e);
                    }
                }
            }
            let nrm = norm2(&e);
            if nrm > 0.5 {
                e.iter_mut().for_each(|x| *x /= nrm);
                cols[j] = e;
                break;
            }
        }
    }
}

const POWER_MAX_ITERS: usize = 10_000;
const POWER_TOL: f64 = 1e-12;

/// Largest singular value by power iteration on `WᵀW`.
///
/// Runs from the normalized all-ones vector and again from a fixed
/// irregular vector, returning the larger estimate, so a start vector that
/// happens to be orthogonal to the top singular direction cannot go unnoticed.
pub fn spectral_norm(w: &DenseMatrix) -> f64 {
    let n = w.cols();
    if n == 0 || w.rows() == 0 {
        return 0.0;
    }
    let ones = vec![1.0; n];
    const PHI: f64 = 0.618_033_988_749_894_9;
    let irregular: Vec<f64> = (0..n)
        .map(|i| ((i + 1) as f64 * PHI).fract() - 0.5)
        .collect();
    power_iteration(w, ones).max(power_iteration(w, irregular))
}

fn power_iteration(w: &DenseMatrix, mut x: Vec<f64>) -> f64 {
    let nrm = norm2(&x);
    if nrm == 0.0 {
        return 0.0;
    }
    x.iter_mut().for_each(|v| *v /= nrm);
    let mut prev = f64::NAN;
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let y = w.mul_vec(&x);
        lambda = dot(&y, &y);
        let mut next = w.tr_mul_vec(&y);
        let nn = norm2(&next);
        if nn == 0.0 {
            break;
        }
        next.iter_mut().for_each(|v| *v /= nn);
        x = next;
        if (lambda - prev).abs() < POWER_TOL {
            break;
        }
        prev = lambda;
    }
    // One last Rayleigh quotient at the final iterate.
    let y = w.mul_vec(&x);
    lambda.max(dot(&y, &y)).sqrt()
}

/// Cholesky factor `L` of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::invalid("Cholesky needs a square matrix"));
        }
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) {
                return Err(Error::NumericFailure {
                    step: j,
                    message: format!("matrix not positive definite (pivot {d:e})"),
                });
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in (j + 1)..n {
                let s = a[(i, j)] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                l[i * n + j] = s / d;
            }
        }
        Ok(Cholesky { n, l })
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let s = b[i] - dot(&self.l[i * n..i * n + i], &b[..i]);
            b[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }
}

/// LU factorization with partial pivoting, for the indefinite KKT systems of
/// the active-set polish.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::invalid("LU needs a square matrix"));
        }
        let mut lu = a.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut piv = k;
            for i in (k + 1)..n {
                if lu[i * n + k].abs() > lu[piv * n + k].abs() {
                    piv = i;
                }
            }
            if lu[piv * n + k] == 0.0 {
                return Err(Error::NumericFailure {
                    step: k,
                    message: "singular matrix in LU".into(),
                });
            }
            if piv != k {
                for j in 0..n {
                    lu.swap(k * n + j, piv * n + j);
                }
                perm.swap(k, piv);
            }
            let d = lu[k * n + k];
            for i in (k + 1)..n {
                let f = lu[i * n + k] / d;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s = dot(&self.lu[i * n..i * n + i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s = dot(&self.lu[i * n + i + 1..(i + 1) * n], &x[i + 1..]);
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }
}
