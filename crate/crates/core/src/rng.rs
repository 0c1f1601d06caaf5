//! Seeded PCG generator and random test-data helpers.
//!
//! `Pcg64` (PCG XSL RR 128/64) gives identical streams on every platform for a
//! given seed.

use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_distr::StandardNormal;

use crate::linalg::SymMatrix;

pub type Pcg = rand_pcg::Pcg64;

pub fn seeded(seed: u64) -> Pcg {
    Pcg::seed_from_u64(seed)
}

pub fn normal(rng: &mut Pcg) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_matrix(rng: &mut Pcg, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// Symmetric matrix with standard-normal entries.
pub fn random_symmetric(rng: &mut Pcg, dim: usize) -> SymMatrix {
    SymMatrix::new(normal_matrix(rng, dim, dim)).expect("square")
}

/// Well-conditioned SPD matrix `A·Aᵀ/d + 0.5·I`.
pub fn random_spd(rng: &mut Pcg, dim: usize) -> SymMatrix {
    let a = normal_matrix(rng, dim, dim);
    let m = &a * a.transpose() / dim as f64 + DMatrix::<f64>::identity(dim, dim) * 0.5;
    SymMatrix::new(m).expect("square")
}

/// Random matrix with orthonormal columns.
pub fn random_stiefel(rng: &mut Pcg, rows: usize, cols: usize) -> DMatrix<f64> {
    loop {
        let m = normal_matrix(rng, rows, cols);
        if let Ok(w) = crate::linalg::gram_schmidt(&m) {
            return w;
        }
    }
}

pub fn uniform(rng: &mut Pcg, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Sample `k` distinct indices from `0..n` (partial Fisher-Yates).
pub fn sample_without_replacement(rng: &mut Pcg, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k.min(n));
    idx
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Pcg, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
