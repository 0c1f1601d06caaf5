//! Dense linear-algebra kernels shared by the geometry, network and analysis
//! modules. Everything is `f64`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Square symmetric matrix. Symmetry is exact: construction averages the two
/// triangles and mirrors the result.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(invalid(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(invalid("symmetric matrix must have positive dimension"));
        }
        Ok(Self(symmetrize(m)))
    }

    /// Wraps a matrix the caller guarantees to be exactly symmetric.
    pub(crate) fn from_symmetric_unchecked(m: DMatrix<f64>) -> Self {
        debug_assert!(m.nrows() == m.ncols());
        Self(m)
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn from_row_slice(dim: usize, data: &[f64]) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(invalid(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(dim, dim, data))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Congruence `Wᵀ·self·W`.
    pub fn congruence(&self, w: &DMatrix<f64>) -> Result<SymMatrix> {
        if w.nrows() != self.dim() {
            return Err(invalid(format!(
                "congruence: W has {} rows, matrix has dim {}",
                w.nrows(),
                self.dim()
            )));
        }
        Ok(Self(symmetrize(w.transpose() * &self.0 * w)))
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        Self(&self.0 * s)
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        if other.dim() != self.dim() {
            return Err(invalid("dimension mismatch in symmetric addition"));
        }
        Ok(Self(&self.0 + &other.0))
    }

    pub fn frobenius_inner(&self, other: &SymMatrix) -> f64 {
        self.0.dot(&other.0)
    }
}

/// `(M + Mᵀ)/2`, written so that the result is bit-exactly symmetric.
pub fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Symmetric eigendecomposition `M = U·diag(σ)·Uᵀ`.
#[derive(Clone, Debug)]
pub struct EigPair {
    /// Orthogonal matrix whose columns are eigenvectors.
    pub vectors: DMatrix<f64>,
    /// Eigenvalues, non-increasing.
    pub values: DVector<f64>,
}

impl EigPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `U·diag(f(σ))·Uᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let u = &self.vectors;
        let fs = self.values.map(f);
        let mut scaled = u.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= fs[j];
        }
        SymMatrix::from_symmetric_unchecked(symmetrize(scaled * u.transpose()))
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map(|s| s)
    }
}

/// Eigendecomposition of a symmetric matrix via Householder tridiagonalization
/// and implicit symmetric QR. Eigenvalues are sorted non-increasing and each
/// eigenvector is signed so that its largest-magnitude entry is positive.
pub fn sym_eig(m: &SymMatrix) -> Result<EigPair> {
    if !m.is_finite() {
        return Err(invalid("sym_eig: non-finite entries"));
    }
    let n = m.dim();
    let eig = SymmetricEigen::new(m.matrix().clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut vectors = DMatrix::zeros(n, n);
    let mut values = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(dst, &(col * sign));
    }
    Ok(EigPair { vectors, values })
}

/// Lower Cholesky factor with strictly positive diagonal.
pub fn cholesky_lower(p: &SymMatrix) -> Result<DMatrix<f64>> {
    if !p.is_finite() {
        return Err(invalid("cholesky: non-finite entries"));
    }
    let n = p.dim();
    let a = p.matrix();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::NotPositiveDefinite { row: i, pivot: s });
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

const GS_RANK_TOL: f64 = 1e-12;

/// Modified Gram-Schmidt with one re-orthogonalization pass per column.
/// Returns a matrix with orthonormal columns spanning the same nested
/// subspaces as the input columns.
pub fn gram_schmidt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    if cols == 0 || cols > rows {
        return Err(invalid(format!(
            "gram_schmidt needs 1 <= columns <= rows, got {rows}x{cols}"
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(invalid("gram_schmidt: non-finite entries"));
    }
    let mut q = m.clone();
    for j in 0..cols {
        for _pass in 0..2 {
            for k in 0..j {
                let proj = q.column(k).dot(&q.column(j));
                let qk = q.column(k).clone_owned();
                q.column_mut(j).axpy(-proj, &qk, 1.0);
            }
        }
        let norm = q.column(j).norm();
        if norm < GS_RANK_TOL {
            return Err(Error::RankDeficient { column: j, norm });
        }
        q.column_mut(j).unscale_mut(norm);
    }
    Ok(q)
}

/// Minimum-norm least-squares solution of `A·x ≈ b` via the SVD.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(invalid("lstsq: empty system"));
    }
    if b.len() != m {
        return Err(invalid(format!(
            "lstsq: A has {m} rows but b has {} entries",
            b.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(invalid("lstsq: non-finite entries"));
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s_max = svd.singular_values.max();
    let tol = (m.max(n) as f64) * f64::EPSILON * s_max;
    let utb = u.transpose() * b;
    let mut coeffs = DVector::zeros(svd.singular_values.len());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            coeffs[i] = utb[i] / s;
        }
    }
    Ok(v_t.transpose() * coeffs)
}

/// Relative threshold under which two eigenvalues are treated as equal when
/// building the Loewner matrix.
pub const DEGENERATE_EIG_TOL: f64 = 1e-12;

/// Gradient of a scalar loss with respect to `M`, given the gradient `g_out`
/// with respect to `Y = U·f(Σ)·Uᵀ` (Daleckii–Krein).
pub fn matfun_backprop(
    pair: &EigPair,
    f: impl Fn(f64) -> f64,
    f_prime: impl Fn(f64) -> f64,
    g_out: &SymMatrix,
) -> Result<SymMatrix> {
    let n = pair.dim();
    if g_out.dim() != n {
        return Err(invalid("matfun_backprop: gradient dimension mismatch"));
    }
    let sigma = &pair.values;
    let scale = sigma.iter().fold(0.0f64, |acc, s| acc.max(s.abs()));
    let fs: Vec<f64> = sigma.iter().map(|&s| f(s)).collect();
    let u = &pair.vectors;
    let mut inner = u.transpose() * g_out.matrix() * u;
    for i in 0..n {
        for j in 0..n {
            let k = if i == j {
                f_prime(sigma[i])
            } else {
                let gap = sigma[i] - sigma[j];
                if gap.abs() < DEGENERATE_EIG_TOL * scale || gap == 0.0 {
                    f_prime(0.5 * (sigma[i] + sigma[j]))
                } else {
                    (fs[i] - fs[j]) / gap
                }
            };
            inner[(i, j)] *= k;
        }
    }
    Ok(SymMatrix::from_symmetric_unchecked(symmetrize(
        u * inner * u.transpose(),
    )))
}

/// Matrix logarithm of an SPD matrix.
pub fn logm(m: &SymMatrix) -> Result<SymMatrix> {
    let pair = sym_eig(m)?;
    if let Some((row, &pivot)) = pair
        .values
        .iter()
        .enumerate()
        .find(|(_, &s)| !(s > 0.0))
    {
        return Err(Error::NotPositiveDefinite { row, pivot });
    }
    Ok(pair.map(f64::ln))
}

/// Matrix exponential of a symmetric matrix.
pub fn expm(m: &SymMatrix) -> Result<SymMatrix> {
    Ok(sym_eig(m)?.map(f64::exp))
}

/// `‖A‖∞` as the largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// `‖WᵀW − I‖∞` (largest absolute entry).
pub fn orthogonality_error(w: &DMatrix<f64>) -> f64 {
    let k = w.ncols();
    max_abs(&(w.transpose() * w - DMatrix::<f64>::identity(k, k)))
}
