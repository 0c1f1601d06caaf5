//! Log-Cholesky geometry of SPD matrices.
//!
//! An SPD matrix `E = L·Lᵀ` is represented by its Cholesky factor `L`. The
//! factor splits into a strictly lower part `⌊L⌋` and a positive diagonal
//! `𝔻(L)`; the metric is Euclidean on `⌊L⌋` and on `log 𝔻(L)`, which makes
//! the whole space globally flat in the chart `⌊L⌋ + log 𝔻(L)`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky_lower, SymMatrix};

/// Lower-triangular matrix with strictly positive diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyPoint {
    l: DMatrix<f64>,
}

/// Lower-triangular tangent coordinates `⌊L⌋ + log 𝔻(L)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangularTangent {
    t: DMatrix<f64>,
}

/// `(⌊L⌋, 𝔻(L))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPair {
    pub strict: DMatrix<f64>,
    pub diag: DVector<f64>,
}

/// Number of lower-triangular entries (diagonal included) of a `dim × dim`
/// matrix.
pub fn tri_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Number of strictly lower entries.
pub fn strict_len(dim: usize) -> usize {
    dim * (dim.saturating_sub(1)) / 2
}

/// Row-major positions `(i, j)` with `j < i`.
pub fn strict_indices(dim: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..dim).flat_map(|i| (0..i).map(move |j| (i, j)))
}

/// Row-major positions `(i, j)` with `j <= i`.
pub fn lower_indices(dim: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..dim).flat_map(|i| (0..=i).map(move |j| (i, j)))
}

fn check_lower(m: &DMatrix<f64>) -> Result<()> {
    let (r, c) = m.shape();
    if r != c || r == 0 {
        return Err(invalid(format!("expected a non-empty square matrix, got {r}x{c}")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite entries"));
    }
    for i in 0..r {
        for j in i + 1..r {
            if m[(i, j)] != 0.0 {
                return Err(invalid(format!("entry ({i},{j}) above the diagonal is non-zero")));
            }
        }
    }
    Ok(())
}

impl CholeskyPoint {
    pub fn new(l: DMatrix<f64>) -> Result<Self> {
        check_lower(&l)?;
        for i in 0..l.nrows() {
            if !(l[(i, i)] > 0.0) {
                return Err(Error::InvalidDiagonal { index: i, value: l[(i, i)] });
            }
        }
        Ok(Self { l })
    }

    pub fn identity(dim: usize) -> Self {
        Self { l: DMatrix::identity(dim, dim) }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Builds a point from strict-lower entries (row-major) and log-diagonal.
    pub fn from_parts(dim: usize, strict: &[f64], log_diag: &[f64]) -> Result<Self> {
        if strict.len() != strict_len(dim) || log_diag.len() != dim {
            return Err(invalid("from_parts: coordinate lengths do not match dimension"));
        }
        let mut l = DMatrix::zeros(dim, dim);
        for ((i, j), &v) in strict_indices(dim).zip(strict) {
            l[(i, j)] = v;
        }
        for (i, &a) in log_diag.iter().enumerate() {
            l[(i, i)] = a.exp();
        }
        Self::new(l)
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn strict_entries(&self) -> Vec<f64> {
        strict_indices(self.dim()).map(|(i, j)| self.l[(i, j)]).collect()
    }

    pub fn diag_entries(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.l[(i, i)]).collect()
    }

    pub fn log_diag(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.l[(i, i)].ln()).collect()
    }
}

impl TriangularTangent {
    pub fn new(t: DMatrix<f64>) -> Result<Self> {
        check_lower(&t)?;
        Ok(Self { t })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { t: DMatrix::zeros(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    /// Lower triangle flattened row-major (`d(d+1)/2` entries).
    pub fn to_vec(&self) -> Vec<f64> {
        lower_indices(self.dim()).map(|(i, j)| self.t[(i, j)]).collect()
    }

    pub fn from_vec(dim: usize, coords: &[f64]) -> Result<Self> {
        if coords.len() != tri_len(dim) {
            return Err(invalid(format!(
                "expected {} tangent coordinates for dim {dim}, got {}",
                tri_len(dim),
                coords.len()
            )));
        }
        let mut t = DMatrix::zeros(dim, dim);
        for ((i, j), &v) in lower_indices(dim).zip(coords) {
            t[(i, j)] = v;
        }
        Self::new(t)
    }
}

/// `ℒ`: SPD matrix to its Cholesky factor.
pub fn to_cholesky(e: &SymMatrix) -> Result<CholeskyPoint> {
    Ok(CholeskyPoint { l: cholesky_lower(e)? })
}

/// `𝒮`: Cholesky factor back to `L·Lᵀ`.
pub fn from_cholesky(l: &CholeskyPoint) -> SymMatrix {
    SymMatrix::new(&l.l * l.l.transpose()).expect("square")
}

pub fn split(l: &CholeskyPoint) -> SplitPair {
    let d = l.dim();
    let mut strict = l.l.clone();
    for i in 0..d {
        strict[(i, i)] = 0.0;
    }
    SplitPair { strict, diag: l.l.diagonal() }
}

pub fn combine(p: &SplitPair) -> Result<CholeskyPoint> {
    let d = p.diag.len();
    if p.strict.shape() != (d, d) {
        return Err(invalid("combine: strict part and diagonal disagree on dimension"));
    }
    for i in 0..d {
        if p.strict[(i, i)] != 0.0 {
            return Err(invalid("combine: strict part has a non-zero diagonal"));
        }
    }
    let mut l = p.strict.clone();
    for i in 0..d {
        l[(i, i)] = p.diag[i];
    }
    CholeskyPoint::new(l)
}

fn same_dim(a: &CholeskyPoint, b: &CholeskyPoint) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(invalid(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `L ⊙ K = ⌊L⌋ + ⌊K⌋ + 𝔻(L)𝔻(K)`.
pub fn group_op(l: &CholeskyPoint, k: &CholeskyPoint) -> Result<CholeskyPoint> {
    same_dim(l, k)?;
    let d = l.dim();
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            out[(i, j)] = l.l[(i, j)] + k.l[(i, j)];
        }
        out[(i, i)] = l.l[(i, i)] * k.l[(i, i)];
    }
    CholeskyPoint::new(out)
}

fn lex_cmp(a: &CholeskyPoint, wa: f64, b: &CholeskyPoint, wb: f64) -> Ordering {
    a.l.iter()
        .zip(b.l.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| wa.total_cmp(&wb))
}

/// Closed-form log-Cholesky Fréchet mean
/// `(1/n)Σ wᵢ⌊Lᵢ⌋ + exp((1/n)Σ wᵢ log 𝔻(Lᵢ))`.
///
/// The `1/n` factor is applied regardless of the weights, so weights that sum
/// to `n` give a proper weighted mean. Inputs are summed in a canonical
/// (lexicographic) order, which makes the result bit-identical under any
/// permutation of the inputs.
pub fn frechet_mean(points: &[CholeskyPoint], weights: &[f64]) -> Result<CholeskyPoint> {
    if points.is_empty() {
        return Err(invalid("frechet_mean: empty point set"));
    }
    if weights.len() != points.len() {
        return Err(invalid(format!(
            "frechet_mean: {} points but {} weights",
            points.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(invalid(format!("frechet_mean: weight {w} is not positive")));
    }
    let d = points[0].dim();
    if points.iter().any(|p| p.dim() != d) {
        return Err(invalid("frechet_mean: points differ in dimension"));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&points[a], weights[a], &points[b], weights[b]));

    let inv_n = 1.0 / points.len() as f64;
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            let s: f64 = order.iter().map(|&k| weights[k] * points[k].l[(i, j)]).sum();
            out[(i, j)] = inv_n * s;
        }
        let s: f64 = order.iter().map(|&k| weights[k] * points[k].l[(i, i)].ln()).sum();
        out[(i, i)] = (inv_n * s).exp();
    }
    CholeskyPoint::new(out)
}

/// Mean with uniform unit weights.
pub fn frechet_mean_uniform(points: &[CholeskyPoint]) -> Result<CholeskyPoint> {
    frechet_mean(points, &vec![1.0; points.len()])
}

/// Log-Cholesky geodesic distance
/// `sqrt(‖⌊L⌋−⌊K⌋‖_F² + ‖log𝔻(L) − log𝔻(K)‖_F²)`.
pub fn geodesic_distance(l: &CholeskyPoint, k: &CholeskyPoint) -> Result<f64> {
    same_dim(l, k)?;
    Ok(squared_distance(l, k).sqrt())
}

pub(crate) fn squared_distance(l: &CholeskyPoint, k: &CholeskyPoint) -> f64 {
    let d = l.dim();
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..i {
            let diff = l.l[(i, j)] - k.l[(i, j)];
            acc += diff * diff;
        }
        let diff = l.l[(i, i)].ln() - k.l[(i, i)].ln();
        acc += diff * diff;
    }
    acc
}

/// Global chart `⌊L⌋ + log 𝔻(L)`.
pub fn chart_log(l: &CholeskyPoint) -> TriangularTangent {
    let mut t = l.l.clone();
    for i in 0..l.dim() {
        t[(i, i)] = t[(i, i)].ln();
    }
    TriangularTangent { t }
}

/// Inverse chart `⌊T⌋ + exp 𝔻(T)`.
pub fn chart_exp(t: &TriangularTangent) -> CholeskyPoint {
    let mut l = t.t.clone();
    for i in 0..t.dim() {
        l[(i, i)] = l[(i, i)].exp();
    }
    CholeskyPoint { l }
}
