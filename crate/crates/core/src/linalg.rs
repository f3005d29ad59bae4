//! Dense row-major linear algebra.
//!
//! Only what the estimators and oracles need: products, Kronecker-structured
//! application, Cholesky solves, a one-sided Jacobi SVD and the
//! pseudo-inverse / ridge solves built on top of them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative threshold for singular values in [`pseudo_inverse`].
pub const DEFAULT_PINV_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Single-column matrix.
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    /// Single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
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

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }

    /// Stack `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("vstack", format!("{} vs {} columns", self.cols, other.cols)));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Place `other` to the right of `self`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("hstack", format!("{} vs {} rows", self.rows, other.rows)));
        }
        let cols = self.cols + other.cols;
        let mut out = Matrix::zeros(self.rows, cols);
        for i in 0..self.rows {
            out.row_mut(i)[..self.cols].copy_from_slice(self.row(i));
            out.row_mut(i)[self.cols..].copy_from_slice(other.row(i));
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!("lhs {}x{} vs rhs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without forming the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim(
                "matmul_nt",
                format!(
                    "lhs {}x{} vs rhs^T of {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `self^T * other` without forming the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim(
                "matmul_tn",
                format!(
                    "lhs^T of {}x{} vs rhs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, bj) in orow.iter_mut().zip(b) {
                    *o += ai * bj;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::dim(
                "matvec",
                format!("{}x{} matrix vs vector of {}", self.rows, self.cols, v.len()),
            ));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self^T v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return Err(Error::dim(
                "matvec_t",
                format!("{}x{} matrix^T vs vector of {}", self.rows, self.cols, v.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            axpy(vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, ctx: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(ctx, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn add_diag(&mut self, v: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += v;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius inner product.
    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "frobenius_dot",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(dot(&self.data, &other.data))
    }

    /// Reinterpret the row-major entries under a new shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.data)
    }

    /// Column-major vectorization (stacks columns).
    pub fn vec_col_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.get(i, j));
            }
        }
        out
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

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Explicit Kronecker product. Quadratic memory; used by oracles and tests.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a.get(i, j);
            for k in 0..br {
                for l in 0..bc {
                    out.set(i * br + k, j * bc + l, aij * b.get(k, l));
                }
            }
        }
    }
    out
}

/// Computes `C G D^T`, i.e. `(C ⊗ D) vec(G)` reshaped, for row-major `vec`.
pub fn kron_apply(c: &Matrix, d: &Matrix, g: &Matrix) -> Result<Matrix> {
    if c.cols() != g.rows() {
        return Err(Error::dim(
            "kron_apply",
            format!("C has {} columns but G has {} rows", c.cols(), g.rows()),
        ));
    }
    if d.cols() != g.cols() {
        return Err(Error::dim(
            "kron_apply",
            format!("D has {} columns but G has {} columns", d.cols(), g.cols()),
        ));
    }
    c.matmul(&g.matmul_nt(d)?)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim("cholesky", format!("{:?} not square", a.shape())));
    }
    let scale = (0..n)
        .fold(0.0f64, |m, i| m.max(a.get(i, i).abs()))
        .max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j) - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(d > 1e-14 * scale) {
            return Err(Error::Singular(format!(
                "matrix not positive definite at pivot {j} (value {d:.3e})"
            )));
        }
        d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let s = a.get(i, j) - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn forward_substitute(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let s = b[i] - dot(&l.row(i)[..i], &x[..i]);
        x[i] = s / l.get(i, i);
    }
    x
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub fn backward_substitute_t(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if a.rows() != b.len() {
        return Err(Error::dim(
            "solve_spd",
            format!("{:?} system with rhs of {}", a.shape(), b.len()),
        ));
    }
    let l = cholesky(a)?;
    Ok(backward_substitute_t(&l, &forward_substitute(&l, b)))
}

/// Thin singular value decomposition `A = U diag(s) V^T`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

/// One-sided Jacobi SVD. Singular values are returned in decreasing order.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if a.rows() < a.cols() {
        let t = svd(&a.transpose())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    let (m, n) = a.shape();
    // columns of the working matrix and of V, stored contiguously
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let eps = f64::EPSILON;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(f64, usize)> = cols.iter().enumerate().map(|(j, c)| (norm2(c), j)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &(sigma, j)) in order.iter().enumerate() {
        s.push(sigma);
        for i in 0..m {
            u.set(i, k, if sigma > 0.0 { cols[j][i] / sigma } else { 0.0 });
        }
        for i in 0..n {
            v.set(i, k, vcols[j][i]);
        }
    }
    Ok(Svd { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Moore–Penrose pseudo-inverse; singular values below `tol * σ_max` are
/// treated as zero.
pub fn pseudo_inverse(m: &Matrix, tol: f64) -> Result<Matrix> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pseudo_inverse tol must be > 0, got {tol}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("pseudo_inverse input".into()));
    }
    let Svd { u, s, v } = svd(m)?;
    let smax = s.first().copied().unwrap_or(0.0);
    let (rows, cols) = m.shape();
    let mut out = Matrix::zeros(cols, rows);
    for (k, &sigma) in s.iter().enumerate() {
        if sigma <= tol * smax || sigma == 0.0 {
            continue;
        }
        let inv = 1.0 / sigma;
        for i in 0..cols {
            let vik = v.get(i, k) * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..rows {
                out.add_at(i, j, vik * u.get(j, k));
            }
        }
    }
    Ok(out)
}

/// Numerical rank with the same thresholding as [`pseudo_inverse`].
pub fn rank(m: &Matrix, tol: f64) -> Result<usize> {
    let s = svd(m)?.s;
    let smax = s.first().copied().unwrap_or(0.0);
    Ok(s.iter().filter(|&&x| x > tol * smax && x > 0.0).count())
}

/// Minimizer of `‖A x − b‖² + λ‖x‖²` via the normal equations.
pub fn ridge_regression(a: &Matrix, b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if a.rows() != b.len() {
        return Err(Error::dim(
            "ridge_regression",
            format!("A has {} rows but b has {}", a.rows(), b.len()),
        ));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut gram = a.matmul_tn(a)?;
    gram.add_diag(lambda);
    let rhs = a.matvec_t(b)?;
    match solve_spd(&gram, &rhs) {
        Ok(x) => Ok(x),
        Err(Error::Singular(msg)) if lambda == 0.0 => Err(Error::Singular(format!(
            "A^T A is singular ({msg}); use a positive lambda"
        ))),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let d = a.sub(b).unwrap().max_abs();
        assert!(d < tol, "max diff {d:e} >= {tol:e}");
    }

    #[test]
    fn kron_apply_identity_and_scalar() {
        let g = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i2 = Matrix::identity(2);
        assert_eq!(kron_apply(&i2, &i2, &g).unwrap(), g);
        let c = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let d = Matrix::from_rows(&[vec![3.0]]).unwrap();
        let one = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(kron_apply(&c, &d, &one).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn kron_apply_matches_materialized_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random(&mut rng, 3, 2);
        let d = random(&mut rng, 4, 3);
        let g = random(&mut rng, 2, 3);
        let fast = kron_apply(&c, &d, &g).unwrap();
        let big = kron(&c, &d);
        let slow = big.matvec(g.as_slice()).unwrap();
        assert_eq!(fast.shape(), (3, 4));
        for (a, b) in fast.as_slice().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kron_apply_reports_offending_pair() {
        let err = kron_apply(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2), &Matrix::zeros(2, 2))
            .unwrap_err()
            .to_string();
        assert!(err.contains("C has 3 columns"), "{err}");
        let err = kron_apply(&Matrix::zeros(2, 2), &Matrix::zeros(2, 5), &Matrix::zeros(2, 2))
            .unwrap_err()
            .to_string();
        assert!(err.contains("D has 5 columns"), "{err}");
    }

    #[test]
    fn pinv_examples() {
        let i3 = Matrix::identity(3);
        assert_close(&pseudo_inverse(&i3, DEFAULT_PINV_TOL).unwrap(), &i3, 1e-14);
        let d = Matrix::diag(&[2.0, 0.0]);
        assert_close(
            &pseudo_inverse(&d, DEFAULT_PINV_TOL).unwrap(),
            &Matrix::diag(&[0.5, 0.0]),
            1e-14,
        );
    }

    #[test]
    fn pinv_rejects_non_finite() {
        let m = Matrix::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(pseudo_inverse(&m, 1e-10), Err(Error::NonFinite(_))));
    }

    #[test]
    fn penrose_identities_random_4x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random(&mut rng, 4, 3);
        let p = pseudo_inverse(&m, DEFAULT_PINV_TOL).unwrap();
        let mp = m.matmul(&p).unwrap();
        let pm = p.matmul(&m).unwrap();
        assert_close(&mp.matmul(&m).unwrap(), &m, 1e-8);
        assert_close(&pm.matmul(&p).unwrap(), &p, 1e-8);
        assert_close(&mp, &mp.transpose(), 1e-8);
        assert_close(&pm, &pm.transpose(), 1e-8);
    }

    #[test]
    fn ridge_examples() {
        let a = Matrix::identity(2);
        let x = ridge_regression(&a, &[2.0, 4.0], 1.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
        let x = ridge_regression(&a, &[2.0, 4.0], 0.0).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-14 && (x[1] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn ridge_singular_without_lambda_errors() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let err = ridge_regression(&a, &[1.0, 2.0], 0.0).unwrap_err();
        assert!(err.to_string().contains("positive lambda"), "{err}");
        assert!(ridge_regression(&a, &[1.0, 2.0], 0.1).is_ok());
    }

    #[test]
    fn svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(r, c) in &[(5, 3), (3, 5), (4, 4)] {
            let m = random(&mut rng, r, c);
            let Svd { u, s, v } = svd(&m).unwrap();
            let us = Matrix::from_vec(
                u.rows(),
                u.cols(),
                (0..u.rows() * u.cols())
                    .map(|k| u.as_slice()[k] * s[k % u.cols()])
                    .collect(),
            )
            .unwrap();
            assert_close(&us.matmul_nt(&v).unwrap(), &m, 1e-12);
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn cholesky_solve() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let x = solve_spd(&a, &[2.0, 1.0]).unwrap();
        let r = a.matvec(&x).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-14 && (r[1] - 1.0).abs() < 1e-14);
        assert!(cholesky(&Matrix::diag(&[1.0, -1.0])).is_err());
    }
}
