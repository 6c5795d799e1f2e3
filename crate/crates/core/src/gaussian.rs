//! Gaussian parameterizations and upper-triangular Cholesky factors with
//! rank-one update and downdate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{axpy, dot, Matrix};
use crate::parallel::{map_range, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("downdate would leave a matrix that is not positive definite (pivot {index})")]
    DowndateLossOfPositivity { index: usize },
    #[error("triangular factor is singular at diagonal entry {index}")]
    SingularFactor { index: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not positive definite (pivot {index})")]
    NotPositiveDefinite { index: usize },
    #[error("empty input")]
    EmptyInput,
}

/// Pivot ratio below which a hyperbolic rotation is refused.
pub const DOWNDATE_GUARD: f64 = 1e-14;
/// Diagonal magnitude below which a factor counts as singular.
pub const SINGULAR_DIAG: f64 = 1e-300;

/// Upper-triangular factor `R`, stored row-major with an explicit zero lower part.
/// The represented matrix is `R^T R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperFactor {
    n: usize,
    data: Vec<f64>,
}

impl UpperFactor {
    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    /// Factor of `tau * I`.
    pub fn scaled_identity(n: usize, tau: f64) -> Self {
        let mut data = vec![0.0; n * n];
        let d = tau.sqrt();
        for i in 0..n {
            data[i * n + i] = d;
        }
        Self { n, data }
    }

    /// Wraps a row-major buffer after checking shape, triangularity and a positive diagonal.
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self, GaussianError> {
        if data.len() != n * n {
            return Err(GaussianError::DimensionMismatch {
                expected: n * n,
                found: data.len(),
            });
        }
        for i in 0..n {
            if !(data[i * n + i] > 0.0) {
                return Err(GaussianError::SingularFactor { index: i });
            }
            if data[i * n..i * n + i].iter().any(|&v| v != 0.0) {
                return Err(GaussianError::NotPositiveDefinite { index: i });
            }
        }
        Ok(Self { n, data })
    }

    /// Upper Cholesky factor of a symmetric positive definite matrix.
    pub fn cholesky(a: &Matrix) -> Result<Self, GaussianError> {
        let (rows, cols) = a.shape();
        if rows != cols {
            return Err(GaussianError::DimensionMismatch {
                expected: rows,
                found: cols,
            });
        }
        let n = rows;
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            r[i * n + i..(i + 1) * n].copy_from_slice(&a.row(i)[i..]);
        }
        // Right-looking: after pivot k, subtract the outer product of row k from the trailing block.
        for k in 0..n {
            let pivot = r[k * n + k];
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(GaussianError::NotPositiveDefinite { index: k });
            }
            let d = pivot.sqrt();
            let inv = 1.0 / d;
            r[k * n + k] = d;
            for j in k + 1..n {
                r[k * n + j] *= inv;
            }
            let (head, tail) = r.split_at_mut((k + 1) * n);
            let rk = &head[k * n..(k + 1) * n];
            for i in k + 1..n {
                let f = rk[i];
                if f != 0.0 {
                    let row = &mut tail[(i - k - 1) * n..(i - k) * n];
                    for j in i..n {
                        row[j] -= f * rk[j];
                    }
                }
            }
        }
        Ok(Self { n, data: r })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Row `i` from the diagonal onward.
    pub fn upper_row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n + i..(i + 1) * self.n]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_row_major(self.n, self.n, self.data.clone()).expect("square buffer")
    }

    /// `R^T R` as a dense matrix.
    pub fn gram(&self) -> Matrix {
        let n = self.n;
        let mut g = Matrix::zeros(n, n);
        for k in 0..n {
            let row = self.upper_row(k);
            for (a, &rka) in row.iter().enumerate() {
                if rka != 0.0 {
                    let i = k + a;
                    let dst = &mut g.row_mut(i)[k..];
                    axpy(rka, row, &mut dst[..n - k]);
                }
            }
        }
        g
    }

    /// In-place `R^T R + v v^T`; `work` holds `v` on entry and is destroyed.
    pub fn update_in_place(&mut self, work: &mut [f64]) {
        assert_eq!(work.len(), self.n, "update vector has wrong length");
        let n = self.n;
        let start = match work.iter().position(|&v| v != 0.0) {
            Some(s) => s,
            None => return,
        };
        for k in start..n {
            let xk = work[k];
            if xk == 0.0 {
                continue;
            }
            let rkk = self.data[k * n + k];
            // Factor entries stay far from the overflow range, so no hypot.
            let r = (rkk * rkk + xk * xk).sqrt();
            let inv_rkk = 1.0 / rkk;
            let c = r * inv_rkk;
            let s = xk * inv_rkk;
            let inv_c = rkk / r;
            self.data[k * n + k] = r;
            let row = &mut self.data[k * n + k + 1..(k + 1) * n];
            let w = &mut work[k + 1..];
            for (rkj, wj) in row.iter_mut().zip(w.iter_mut()) {
                let updated = (*rkj + s * *wj) * inv_c;
                *wj = c * *wj - s * updated;
                *rkj = updated;
            }
        }
    }

    /// In-place `R^T R - v v^T` by hyperbolic rotations. On failure the factor is
    /// restored; `work` holds `v` on entry and is destroyed. `backup` is scratch.
    pub fn downdate_in_place(
        &mut self,
        work: &mut [f64],
        backup: &mut Vec<f64>,
    ) -> Result<(), GaussianError> {
        assert_eq!(work.len(), self.n, "downdate vector has wrong length");
        let n = self.n;
        let start = match work.iter().position(|&v| v != 0.0) {
            Some(s) => s,
            None => return Ok(()),
        };
        backup.clear();
        for k in start..n {
            let xk = work[k];
            if xk == 0.0 {
                continue;
            }
            let rkk = self.data[k * n + k];
            let t = xk / rkk;
            let d = (1.0 - t) * (1.0 + t);
            if !(d > DOWNDATE_GUARD) {
                self.restore(backup);
                return Err(GaussianError::DowndateLossOfPositivity { index: k });
            }
            let c = d.sqrt();
            let inv_c = 1.0 / c;
            backup.push(k as f64);
            backup.extend_from_slice(&self.data[k * n + k..(k + 1) * n]);
            self.data[k * n + k] = rkk * c;
            let row = &mut self.data[k * n + k + 1..(k + 1) * n];
            let w = &mut work[k + 1..];
            for (rkj, wj) in row.iter_mut().zip(w.iter_mut()) {
                let updated = (*rkj - t * *wj) * inv_c;
                *wj = c * *wj - t * updated;
                *rkj = updated;
            }
        }
        Ok(())
    }

    fn restore(&mut self, backup: &[f64]) {
        let n = self.n;
        let mut pos = 0;
        while pos < backup.len() {
            let k = backup[pos] as usize;
            let len = n - k;
            self.data[k * n + k..(k + 1) * n].copy_from_slice(&backup[pos + 1..pos + 1 + len]);
            pos += 1 + len;
        }
    }

    fn check_len(&self, len: usize) -> Result<(), GaussianError> {
        if len != self.n {
            return Err(GaussianError::DimensionMismatch {
                expected: self.n,
                found: len,
            });
        }
        Ok(())
    }

    fn check_diag(&self) -> Result<(), GaussianError> {
        for i in 0..self.n {
            if !(self.data[i * self.n + i].abs() >= SINGULAR_DIAG) {
                return Err(GaussianError::SingularFactor { index: i });
            }
        }
        Ok(())
    }

    /// Solves `R x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) -> Result<(), GaussianError> {
        self.check_len(b.len())?;
        self.check_diag()?;
        let n = self.n;
        for i in (0..n).rev() {
            let row = &self.data[i * n..(i + 1) * n];
            let s = b[i] - dot(&row[i + 1..], &b[i + 1..]);
            b[i] = s / row[i];
        }
        Ok(())
    }

    /// Solves `R^T x = b` in place, skipping the leading zeros of `b`.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) -> Result<(), GaussianError> {
        self.check_len(b.len())?;
        self.check_diag()?;
        let n = self.n;
        let start = b.iter().position(|&v| v != 0.0).unwrap_or(n);
        for i in start..n {
            let row = &self.data[i * n..(i + 1) * n];
            // The reciprocal does not depend on b, so it stays off the critical path.
            let xi = b[i] * (1.0 / row[i]);
            b[i] = xi;
            if xi != 0.0 {
                let (_, rest) = b.split_at_mut(i + 1);
                axpy(-xi, &row[i + 1..], rest);
            }
        }
        Ok(())
    }

    /// Two `R^T x = b` solves in one pass over `R`. Each result is bitwise equal
    /// to the separate solve.
    pub fn solve_lower_pair_in_place(&self, a: &mut [f64], b: &mut [f64]) -> Result<(), GaussianError> {
        self.check_len(a.len())?;
        self.check_len(b.len())?;
        self.check_diag()?;
        let n = self.n;
        let first = |v: &[f64]| v.iter().position(|&x| x != 0.0).unwrap_or(n);
        let start = first(a).min(first(b));
        for i in start..n {
            let row = &self.data[i * n..(i + 1) * n];
            let inv = 1.0 / row[i];
            let xa = a[i] * inv;
            let xb = b[i] * inv;
            a[i] = xa;
            b[i] = xb;
            let (ra, rb) = (&mut a[i + 1..], &mut b[i + 1..]);
            for ((aj, bj), rj) in ra.iter_mut().zip(rb.iter_mut()).zip(&row[i + 1..]) {
                *aj += -xa * rj;
                *bj += -xb * rj;
            }
        }
        Ok(())
    }

    /// Diagonal of `(R^T R)^{-1}`, i.e. squared row norms of `R^{-1}`.
    pub fn inverse_gram_diag(&self) -> Result<Vec<f64>, GaussianError> {
        self.inverse_gram_diag_with(Execution::default())
    }

    pub fn inverse_gram_diag_with(
        &self,
        exec: Execution,
    ) -> Result<Vec<f64>, GaussianError> {
        self.check_diag()?;
        let n = self.n;
        // Row i of R^{-1} solves R^T z = e_i; its squared norm is C_ii.
        let rows = map_range(exec, n, |i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            self.solve_lower_in_place(&mut e).expect("diagonal checked");
            e.iter().map(|v| v * v).sum::<f64>()
        });
        Ok(rows)
    }

    /// `R v`, row by row.
    pub fn mul_upper_with(&self, exec: Execution, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n, "vector has wrong length");
        map_range(exec, self.n, |i| dot(self.upper_row(i), &v[i..]))
    }

    /// `R^T v`. Output columns are split into blocks that walk the rows of `R`
    /// contiguously; every entry accumulates over `i` in increasing order, so both
    /// policies agree bitwise.
    pub fn mul_lower_with(&self, exec: Execution, v: &[f64]) -> Vec<f64> {
        const BLOCK: usize = 64;
        assert_eq!(v.len(), self.n, "vector has wrong length");
        let n = self.n;
        let blocks = map_range(exec, n.div_ceil(BLOCK), |b| {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(n);
            let mut acc = vec![0.0; hi - lo];
            for (i, &vi) in v.iter().enumerate().take(hi) {
                let from = lo.max(i);
                let row = &self.data[i * n + from..i * n + hi];
                for (a, r) in acc[from - lo..].iter_mut().zip(row) {
                    *a += r * vi;
                }
            }
            acc
        });
        blocks.concat()
    }

    /// Diagonal of `R^T R`: squared column norms.
    pub fn gram_diag(&self) -> Vec<f64> {
        let n = self.n;
        let mut d = vec![0.0; n];
        for k in 0..n {
            for (j, v) in self.upper_row(k).iter().enumerate() {
                d[k + j] += v * v;
            }
        }
        d
    }
}

pub fn chol_rank_one_update(r: &UpperFactor, v: &[f64]) -> Result<UpperFactor, GaussianError> {
    r.check_len(v.len())?;
    let mut out = r.clone();
    let mut work = v.to_vec();
    out.update_in_place(&mut work);
    Ok(out)
}

pub fn chol_rank_one_downdate(r: &UpperFactor, v: &[f64]) -> Result<UpperFactor, GaussianError> {
    r.check_len(v.len())?;
    let mut out = r.clone();
    let mut work = v.to_vec();
    out.downdate_in_place(&mut work, &mut Vec::new())?;
    Ok(out)
}

/// Solves `R x = rhs` (or `R^T x = rhs` when `transpose` is set).
pub fn triangular_solve(
    r: &UpperFactor,
    rhs: &[f64],
    transpose: bool,
) -> Result<Vec<f64>, GaussianError> {
    let mut x = rhs.to_vec();
    if transpose {
        r.solve_lower_in_place(&mut x)?;
    } else {
        r.solve_upper_in_place(&mut x)?;
    }
    Ok(x)
}

/// Solves `(R^T R) x = b`.
pub fn gram_solve(r: &UpperFactor, b: &[f64]) -> Result<Vec<f64>, GaussianError> {
    let mut x = b.to_vec();
    r.solve_lower_in_place(&mut x)?;
    r.solve_upper_in_place(&mut x)?;
    Ok(x)
}

/// Dense `(R^T R)^{-1}`.
pub fn gram_inverse(r: &UpperFactor) -> Result<Matrix, GaussianError> {
    let n = r.dim();
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = gram_solve(r, &e)?;
        for (i, v) in col.into_iter().enumerate() {
            inv[(i, j)] = v;
        }
    }
    inv.symmetrize();
    Ok(inv)
}

/// Mean and covariance factor `C = S^T S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentParam {
    pub mu: Vec<f64>,
    pub chol_c: UpperFactor,
}

/// Precision mean `h = Lambda mu` and precision factor `Lambda = R^T R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalParam {
    pub h: Vec<f64>,
    pub chol_lambda: UpperFactor,
}

impl MomentParam {
    pub fn new(mu: Vec<f64>, chol_c: UpperFactor) -> Result<Self, GaussianError> {
        chol_c.check_len(mu.len())?;
        Ok(Self { mu, chol_c })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn covariance(&self) -> Matrix {
        self.chol_c.gram()
    }

    pub fn marginal_variances(&self) -> Vec<f64> {
        self.chol_c.gram_diag()
    }
}

impl NaturalParam {
    pub fn new(h: Vec<f64>, chol_lambda: UpperFactor) -> Result<Self, GaussianError> {
        chol_lambda.check_len(h.len())?;
        Ok(Self { h, chol_lambda })
    }

    /// Standard normal in natural form.
    pub fn standard(n: usize) -> Self {
        Self {
            h: vec![0.0; n],
            chol_lambda: UpperFactor::identity(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn precision(&self) -> Matrix {
        self.chol_lambda.gram()
    }

    pub fn mean(&self) -> Result<Vec<f64>, GaussianError> {
        gram_solve(&self.chol_lambda, &self.h)
    }

    pub fn marginal_variances(&self) -> Result<Vec<f64>, GaussianError> {
        self.chol_lambda.inverse_gram_diag()
    }
}

pub fn to_moment(p: &NaturalParam) -> Result<MomentParam, GaussianError> {
    let mu = p.mean()?;
    let cov = gram_inverse(&p.chol_lambda)?;
    let chol_c = UpperFactor::cholesky(&cov).map_err(|_| GaussianError::SingularFactor { index: 0 })?;
    Ok(MomentParam { mu, chol_c })
}

pub fn to_natural(p: &MomentParam) -> Result<NaturalParam, GaussianError> {
    let h = gram_solve(&p.chol_c, &p.mu)?;
    let prec = gram_inverse(&p.chol_c)?;
    let chol_lambda =
        UpperFactor::cholesky(&prec).map_err(|_| GaussianError::SingularFactor { index: 0 })?;
    Ok(NaturalParam { h, chol_lambda })
}

/// Product of Gaussian densities: precisions and precision means add.
pub fn gaussian_product(params: &[NaturalParam]) -> Result<NaturalParam, GaussianError> {
    let first = params.first().ok_or(GaussianError::EmptyInput)?;
    let n = first.dim();
    let mut h = vec![0.0; n];
    let mut prec = Matrix::zeros(n, n);
    for p in params {
        if p.dim() != n {
            return Err(GaussianError::DimensionMismatch {
                expected: n,
                found: p.dim(),
            });
        }
        axpy(1.0, &p.h, &mut h);
        prec = prec.add(&p.precision());
    }
    let chol_lambda = UpperFactor::cholesky(&prec)?;
    Ok(NaturalParam { h, chol_lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn to_na(m: &Matrix) -> DMatrix<f64> {
        DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let mut b = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                b[(i, j)] = rng.gen_range(-1.0..1.0);
            }
        }
        let mut a = b.transpose().matmul(&b);
        for i in 0..n {
            a[(i, i)] += n as f64 * 0.1;
        }
        a
    }

    fn rel_frob(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).frobenius() / b.frobenius()
    }

    #[test]
    fn update_identity_by_unit_vector() {
        let r = chol_rank_one_update(&UpperFactor::identity(3), &[1.0, 0.0, 0.0]).unwrap();
        assert!((r.get(0, 0) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.get(1, 1), 1.0);
        assert_eq!(r.get(2, 2), 1.0);
        assert_eq!(r.get(0, 1), 0.0);
        let z = chol_rank_one_update(&UpperFactor::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(z, UpperFactor::identity(2));
    }

    #[test]
    fn downdate_inverts_update_example() {
        let r = UpperFactor::from_row_major(2, vec![2f64.sqrt(), 0.0, 0.0, 1.0]).unwrap();
        let d = chol_rank_one_downdate(&r, &[1.0, 0.0]).unwrap();
        assert!(max_abs_diff(d.as_slice(), UpperFactor::identity(2).as_slice()) < 1e-15);
        assert_eq!(
            chol_rank_one_downdate(&UpperFactor::identity(2), &[2.0, 0.0]),
            Err(GaussianError::DowndateLossOfPositivity { index: 0 })
        );
    }

    #[test]
    fn paired_solve_matches_separate_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = UpperFactor::cholesky(&random_spd(&mut rng, 9)).unwrap();
        let mut a = vec![0.0, 0.0, 0.0, 1.5, -0.5, 0.0, 2.0, 0.0, 1.0];
        let mut b: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mut a1, mut b1) = (a.clone(), b.clone());
        r.solve_lower_in_place(&mut a1).unwrap();
        r.solve_lower_in_place(&mut b1).unwrap();
        r.solve_lower_pair_in_place(&mut a, &mut b).unwrap();
        assert_eq!(a, a1);
        assert_eq!(b, b1);
    }

    #[test]
    fn failed_downdate_leaves_factor_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(&mut rng, 6);
        let mut r = UpperFactor::cholesky(&a).unwrap();
        let before = r.clone();
        let mut v: Vec<f64> = vec![0.1, 0.2, 0.3, 0.1, 50.0, 0.0];
        assert!(r.downdate_in_place(&mut v, &mut Vec::new()).is_err());
        assert_eq!(r, before);
    }

    #[test]
    fn update_matches_refactorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_spd(&mut rng, 8);
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = chol_rank_one_update(&UpperFactor::cholesky(&a).unwrap(), &v).unwrap();
        let mut target = a.clone();
        target.add_outer(1.0, &v, &v);
        assert!(rel_frob(&r.gram(), &target) < 1e-12);
        assert!(r.diag().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn downdate_matches_refactorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_spd(&mut rng, 8);
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut b = a.clone();
        b.add_outer(1.0, &v, &v);
        let rb = UpperFactor::cholesky(&b).unwrap();
        let ra = chol_rank_one_downdate(&rb, &v).unwrap();
        let direct = UpperFactor::cholesky(&a).unwrap();
        assert!(max_abs_diff(ra.as_slice(), direct.as_slice()) < 1e-10);
    }

    #[test]
    fn triangular_solves() {
        let id = UpperFactor::identity(3);
        assert_eq!(triangular_solve(&id, &[1.0, -2.0, 3.0], false).unwrap(), vec![1.0, -2.0, 3.0]);
        let d = UpperFactor::from_row_major(2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        assert_eq!(triangular_solve(&d, &[2.0, 4.0], true).unwrap(), vec![1.0, 1.0]);
        assert_eq!(triangular_solve(&d, &[2.0, 4.0], false).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn triangular_solve_matches_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(&mut rng, 10);
        let r = UpperFactor::cholesky(&a).unwrap();
        let rhs: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let rm = to_na(&r.to_matrix());
        let b = DVector::from_vec(rhs.clone());
        let x_up = rm.clone().lu().solve(&b).unwrap();
        let x_lo = rm.transpose().lu().solve(&b).unwrap();
        let mine_up = triangular_solve(&r, &rhs, false).unwrap();
        let mine_lo = triangular_solve(&r, &rhs, true).unwrap();
        for i in 0..10 {
            assert!((mine_up[i] - x_up[i]).abs() < 1e-12 * (1.0 + x_up[i].abs()));
            assert!((mine_lo[i] - x_lo[i]).abs() < 1e-12 * (1.0 + x_lo[i].abs()));
        }
    }

    #[test]
    fn singular_factor_detected() {
        let bad = UpperFactor {
            n: 2,
            data: vec![1.0, 0.0, 0.0, 1e-301],
        };
        assert_eq!(
            triangular_solve(&bad, &[1.0, 1.0], false),
            Err(GaussianError::SingularFactor { index: 1 })
        );
    }

    #[test]
    fn diagonal_conversion() {
        let m = MomentParam::new(
            vec![1.0, 2.0],
            UpperFactor::from_row_major(2, vec![2.0, 0.0, 0.0, 3.0]).unwrap(),
        )
        .unwrap();
        let nat = to_natural(&m).unwrap();
        assert!(max_abs_diff(&nat.h, &[0.25, 2.0 / 9.0]) < 1e-15);
        assert!(max_abs_diff(nat.precision().as_slice(), &[0.25, 0.0, 0.0, 1.0 / 9.0]) < 1e-15);
        let std = to_moment(&NaturalParam::standard(3)).unwrap();
        assert_eq!(std.mu, vec![0.0; 3]);
        assert_eq!(std.chol_c, UpperFactor::identity(3));
    }

    #[test]
    fn random_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = random_spd(&mut rng, 12);
        let mu: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = MomentParam::new(mu.clone(), UpperFactor::cholesky(&a).unwrap()).unwrap();
        let back = to_moment(&to_natural(&m).unwrap()).unwrap();
        assert!(max_abs_diff(&back.mu, &mu) < 1e-9);
        let d0 = m.marginal_variances();
        let d1 = back.marginal_variances();
        for (x, y) in d0.iter().zip(&d1) {
            assert!(((x - y) / x).abs() < 1e-10);
        }
    }

    #[test]
    fn product_examples() {
        let p = gaussian_product(&[NaturalParam::standard(3), NaturalParam::standard(3)]).unwrap();
        assert!(max_abs_diff(p.precision().as_slice(), Matrix::identity(3).scale(2.0).as_slice()) < 1e-15);
        assert_eq!(p.h, vec![0.0; 3]);
        let single = gaussian_product(&[NaturalParam::standard(2)]).unwrap();
        assert_eq!(single, NaturalParam::standard(2));
        assert_eq!(gaussian_product(&[]), Err(GaussianError::EmptyInput));
        assert!(matches!(
            gaussian_product(&[NaturalParam::standard(2), NaturalParam::standard(3)]),
            Err(GaussianError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn product_mean_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = Vec::new();
        let mut covs = Vec::new();
        let mut means = Vec::new();
        for _ in 0..3 {
            let c = random_spd(&mut rng, 5);
            let mu: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = MomentParam::new(mu.clone(), UpperFactor::cholesky(&c).unwrap()).unwrap();
            params.push(to_natural(&m).unwrap());
            covs.push(to_na(&c));
            means.push(DVector::from_vec(mu));
        }
        let prod = gaussian_product(&params).unwrap();
        let mut prec = DMatrix::<f64>::zeros(5, 5);
        let mut h = DVector::<f64>::zeros(5);
        for (c, mu) in covs.iter().zip(&means) {
            let ci = c.clone().try_inverse().unwrap();
            h += &ci * mu;
            prec += ci;
        }
        let want = prec.try_inverse().unwrap() * h;
        let got = prod.mean().unwrap();
        for i in 0..5 {
            assert!((got[i] - want[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn product_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ps: Vec<NaturalParam> = (0..3)
            .map(|_| {
                let c = random_spd(&mut rng, 4);
                let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                NaturalParam::new(h, UpperFactor::cholesky(&c).unwrap()).unwrap()
            })
            .collect();
        let abc = gaussian_product(&ps).unwrap();
        let cba = gaussian_product(&[ps[2].clone(), ps[1].clone(), ps[0].clone()]).unwrap();
        let nested = gaussian_product(&[
            gaussian_product(&ps[..2]).unwrap(),
            ps[2].clone(),
        ])
        .unwrap();
        assert!(max_abs_diff(abc.chol_lambda.as_slice(), cba.chol_lambda.as_slice()) < 1e-12);
        assert!(max_abs_diff(abc.chol_lambda.as_slice(), nested.chol_lambda.as_slice()) < 1e-12);
        assert!(max_abs_diff(&abc.h, &nested.h) < 1e-12);
    }

    #[test]
    fn inverse_diag_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_spd(&mut rng, 8);
        let r = UpperFactor::cholesky(&a).unwrap();
        let inv = to_na(&a).try_inverse().unwrap();
        let d = r.inverse_gram_diag().unwrap();
        for i in 0..8 {
            assert!(((d[i] - inv[(i, i)]) / inv[(i, i)]).abs() < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn update_then_downdate_round_trip(seed in any::<u64>(), n in 2usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_spd(&mut rng, n);
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let r = UpperFactor::cholesky(&a).unwrap();
                let back = chol_rank_one_downdate(&chol_rank_one_update(&r, &v).unwrap(), &v).unwrap();
                prop_assert!(rel_frob(&back.gram(), &a) < 1e-10);
            }

            #[test]
            fn sherman_morrison(seed in any::<u64>(), n in 2usize..10) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = random_spd(&mut rng, n);
                let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let r = chol_rank_one_update(&UpperFactor::cholesky(&b).unwrap(), &u).unwrap();
                let via_factor = gram_inverse(&r).unwrap();
                let binv = to_na(&b).try_inverse().unwrap();
                let un = DVector::from_vec(u);
                let bu = &binv * &un;
                let denom = 1.0 + un.dot(&bu);
                let sm = &binv - (&bu * bu.transpose()) / denom;
                let err = (to_na(&via_factor) - &sm).norm() / sm.norm();
                prop_assert!(err < 1e-9);
            }
        }
    }
}
