//! Dense real matrices and the handful of kernels the spectral analysis needs:
//! Kronecker products, the vec-permutation (commutation) matrix, and the
//! largest eigenvalue of a symmetric operator.
//!
//! Vectorization follows the column-stacking convention: for an `m x n`
//! matrix `A`, `vec(A)[j*m + i] = A[i, j]`.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Upper bound on the number of entries of any matrix built by this module.
pub const MAX_ENTRIES: usize = 1 << 24;

/// Matrix-vector product budget for the eigensolver.
pub const MAX_EIGEN_ITERATIONS: usize = 100_000;

/// Default relative tolerance for [`largest_eigenvalue_symmetric`].
pub const DEFAULT_EIGEN_TOL: f64 = 1e-9;

/// Relative asymmetry accepted by the symmetric eigensolver.
pub const SYMMETRY_TOL: f64 = 1e-10;

const LANCZOS_BASIS: usize = 100;
const START_VECTOR_SEED: u64 = 0x6d6f_7361_6963;

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn check_size(rows: usize, cols: usize, limit: usize) -> Result<()> {
    let requested = rows as u128 * cols as u128;
    if requested > limit as u128 {
        return Err(Error::SizeCap { requested, limit });
    }
    Ok(())
}

impl DenseMatrix {
    /// Builds a matrix from row-major entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_size(rows, cols, MAX_ENTRIES)?;
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
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
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    /// Matrix product. Zero entries of `self` are skipped, which keeps products
    /// with permutation and block-sparse left factors cheap.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        check_size(self.rows, rhs.cols, MAX_ENTRIES)?;
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Dimension(format!(
                "vector of length {} for a {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked `out = self x`; lengths must match.
    pub(crate) fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o = dot(row, x);
        }
    }

    /// `selfᵀ x` without materializing the transpose.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::Dimension(format!(
                "vector of length {} for the transpose of a {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0; self.cols];
        self.tr_matvec_into(x, &mut out);
        Ok(out)
    }

    fn tr_matvec_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&xi, row) in x.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            if xi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(row) {
                *o += xi * a;
            }
        }
    }

    pub fn add(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Dimension(format!(
                "shapes {}x{} and {}x{} differ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Largest absolute entrywise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        if self.rows != other.rows || self.cols != other.cols {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `max |s_ij - s_ji| / max(1, max |s_ij|)`.
    pub fn relative_asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let scale = self.data.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Kronecker product `a ⊗ b`, capped at [`MAX_ENTRIES`].
pub fn kronecker(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    kronecker_capped(a, b, MAX_ENTRIES)
}

pub fn kronecker_capped(a: &DenseMatrix, b: &DenseMatrix, limit: usize) -> Result<DenseMatrix> {
    if a.data.is_empty() || b.data.is_empty() {
        return Err(Error::InvalidArgument(
            "kronecker operands must be non-empty".into(),
        ));
    }
    let rows = a.rows.checked_mul(b.rows);
    let cols = a.cols.checked_mul(b.cols);
    let (rows, cols) = match (rows, cols) {
        (Some(r), Some(c)) => (r, c),
        _ => {
            return Err(Error::SizeCap {
                requested: u128::MAX,
                limit,
            })
        }
    };
    check_size(rows, cols, limit)?;
    let mut out = DenseMatrix::zeros(rows, cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for r in 0..b.rows {
                let dst = (i * b.rows + r) * cols + j * b.cols;
                for (o, &brc) in out.data[dst..dst + b.cols].iter_mut().zip(b.row(r)) {
                    *o = aij * brc;
                }
            }
        }
    }
    Ok(out)
}

/// The vec-permutation matrix `K_{n,d}`: the `nd x nd` permutation with
/// `K_{n,d} vec(A) = vec(Aᵀ)` for every `n x d` matrix `A`.
pub fn commutation_matrix(n: usize, d: usize) -> Result<DenseMatrix> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "commutation matrix needs n, d >= 1 (got n={n}, d={d})"
        )));
    }
    let size = n
        .checked_mul(d)
        .ok_or(Error::SizeCap {
            requested: u128::MAX,
            limit: MAX_ENTRIES,
        })?;
    check_size(size, size, MAX_ENTRIES)?;
    let mut k = DenseMatrix::zeros(size, size);
    for i in 0..n {
        for j in 0..d {
            // A[i, j] sits at j*n + i in vec(A) and at i*d + j in vec(Aᵀ).
            k[(i * d + j, j * n + i)] = 1.0;
        }
    }
    Ok(k)
}

/// Largest eigenvalue of a symmetric matrix.
///
/// The returned value is within `tol * max(1, |λ_max|)` of the true value.
/// The starting vector is drawn from a fixed seed, so repeated calls agree
/// bit for bit.
pub fn largest_eigenvalue_symmetric(s: &DenseMatrix, tol: f64) -> Result<f64> {
    if !s.is_square() || s.rows == 0 {
        return Err(Error::Dimension(format!(
            "eigenvalue of a non-square or empty {}x{} matrix",
            s.rows, s.cols
        )));
    }
    let asym = s.relative_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    largest_eigenvalue_op(s.rows, tol, |x, out| s.matvec_into(x, out))
}

/// Largest eigenvalue of `mᵀm` computed through products with `m` and `mᵀ`.
pub fn largest_eigenvalue_gram(m: &DenseMatrix, tol: f64) -> Result<f64> {
    if m.data.is_empty() {
        return Err(Error::Dimension("empty matrix".into()));
    }
    let mut tmp = vec![0.0; m.rows];
    largest_eigenvalue_op(m.cols, tol, |x, out| {
        m.matvec_into(x, &mut tmp);
        m.tr_matvec_into(&tmp, out);
    })
}

/// Largest eigenvalue of the symmetric operator `apply` on `R^dim`.
///
/// Restarted Lanczos with full reorthogonalization; each restart begins from
/// the current top Ritz vector.
pub fn largest_eigenvalue_op<F>(dim: usize, tol: f64, mut apply: F) -> Result<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if dim == 0 {
        return Err(Error::Dimension("operator on an empty space".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be > 0, got {tol}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(START_VECTOR_SEED);
    let mut start: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut start);

    let basis = dim.min(LANCZOS_BASIS);
    let mut products = 0usize;
    let mut previous: Option<f64> = None;
    let mut w = vec![0.0; dim];

    loop {
        let mut vs: Vec<Vec<f64>> = Vec::with_capacity(basis + 1);
        let mut alpha = Vec::with_capacity(basis);
        let mut beta = Vec::with_capacity(basis);
        vs.push(start.clone());
        let mut invariant = false;

        for j in 0..basis {
            apply(&vs[j], &mut w);
            products += 1;
            let a = dot(&w, &vs[j]);
            alpha.push(a);
            // Two passes of classical Gram-Schmidt against the whole basis.
            for _ in 0..2 {
                for v in &vs {
                    let c = dot(&w, v);
                    for (wi, vi) in w.iter_mut().zip(v) {
                        *wi -= c * vi;
                    }
                }
            }
            let b = norm(&w);
            beta.push(b);
            let scale = alpha.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
            if b <= 1e-13 * scale {
                invariant = true;
                break;
            }
            if j + 1 < basis {
                vs.push(w.iter().map(|x| x / b).collect());
            }
        }

        let k = alpha.len();
        let (evals, evecs) = tridiagonal_eigen(&alpha, &beta[..k - 1])?;
        let (top, theta) = evals
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        let last_coeff = evecs[(k - 1) * k + top];
        let residual = if invariant {
            0.0
        } else {
            (beta[k - 1] * last_coeff).abs()
        };

        let mut ritz = vec![0.0; dim];
        for (i, v) in vs.iter().take(k).enumerate() {
            let c = evecs[i * k + top];
            for (r, vi) in ritz.iter_mut().zip(v) {
                *r += c * vi;
            }
        }
        normalize(&mut ritz);

        let scale = theta.abs().max(1.0);
        let settled = previous.is_some_and(|p| (theta - p).abs() <= tol * scale);
        if invariant
            || k == dim
            || residual <= tol * scale
            || (settled && residual <= tol.sqrt() * scale)
        {
            return Ok(theta);
        }
        if products >= MAX_EIGEN_ITERATIONS {
            return Err(Error::NoConvergence {
                iterations: products,
                estimate: theta,
                residual,
                last_iterate: ritz,
            });
        }
        previous = Some(theta);
        start = ritz;
    }
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Eigen-decomposition of a symmetric tridiagonal matrix by implicit QL.
///
/// Returns the eigenvalues and a row-major `k x k` matrix whose column `j` is
/// the eigenvector of eigenvalue `j`.
fn tridiagonal_eigen(diag: &[f64], offdiag: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = diag.len();
    let mut d = diag.to_vec();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(offdiag);
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let eps = f64::EPSILON;
    let mut f = 0.0;
    let mut tst1 = 0.0_f64;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut sweeps = 0;
            loop {
                sweeps += 1;
                if sweeps > 60 {
                    return Err(Error::NoConvergence {
                        iterations: sweeps,
                        estimate: d[l],
                        residual: e[l].abs(),
                        last_iterate: d.clone(),
                    });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[k * n + i + 1];
                        v[k * n + i + 1] = s * v[k * n + i] + c * h;
                        v[k * n + i] = c * v[k * n + i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok((d, v))
}
