//! Pieces shared by the two trainable models: the half-vectorization and
//! linear classifier head, softmax cross-entropy, training metrics and the
//! little-endian checkpoint codec.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{lower_indices, tri_len};
use crate::linalg::SymMatrix;
use crate::rng::{normal, Pcg};

/// Lower triangle of a symmetric matrix with off-diagonal entries scaled by
/// `√2`, so that `‖halfvec(M)‖₂ = ‖M‖_F`.
pub fn halfvec(m: &SymMatrix) -> DVector<f64> {
    let d = m.dim();
    DVector::from_iterator(
        tri_len(d),
        lower_indices(d).map(|(i, j)| {
            if i == j {
                m.get(i, i)
            } else {
                std::f64::consts::SQRT_2 * m.get(i, j)
            }
        }),
    )
}

/// Adjoint of [`halfvec`]: the symmetric gradient `G` with
/// `⟨G, dM⟩ = ⟨g, halfvec(dM)⟩` for symmetric `dM`.
pub fn halfvec_adjoint(dim: usize, g: &DVector<f64>) -> SymMatrix {
    let mut m = DMatrix::zeros(dim, dim);
    for ((i, j), &v) in lower_indices(dim).zip(g.iter()) {
        if i == j {
            m[(i, i)] = v;
        } else {
            let h = v / std::f64::consts::SQRT_2;
            m[(i, j)] = h;
            m[(j, i)] = h;
        }
    }
    SymMatrix::from_symmetric_unchecked(m)
}

/// Affine map from features to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LinearHead {
    pub fn zeros(inputs: usize, classes: usize) -> Self {
        Self { weights: DMatrix::zeros(classes, inputs), bias: DVector::zeros(classes) }
    }

    /// Gaussian weights with standard deviation `1/√inputs`, zero bias.
    pub fn init(rng: &mut Pcg, inputs: usize, classes: usize) -> Self {
        let s = 1.0 / (inputs as f64).sqrt();
        Self {
            weights: DMatrix::from_fn(classes, inputs, |_, _| s * normal(rng)),
            bias: DVector::zeros(classes),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.inputs() {
            return Err(invalid(format!(
                "classifier head expects {} inputs, got {}",
                self.inputs(),
                x.len()
            )));
        }
        Ok(&self.weights * x + &self.bias)
    }

    /// Returns `(∂L/∂x, ∂L/∂weights, ∂L/∂bias)`.
    pub fn backward(
        &self,
        x: &DVector<f64>,
        g_logits: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
        (self.weights.transpose() * g_logits, g_logits * x.transpose(), g_logits.clone())
    }
}

/// Logits of a LogEig output through half-vectorization and the head.
pub fn classify_forward(m: &SymMatrix, head: &LinearHead) -> Result<DVector<f64>> {
    head.forward(&halfvec(m))
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &DVector<f64>, label: usize) -> (f64, DVector<f64>) {
    let max = logits.max();
    let exps = logits.map(|v| (v - max).exp());
    let z = exps.sum();
    let mut grad = exps / z;
    let loss = -(grad[label].ln());
    grad[label] -= 1.0;
    (loss, grad)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose weights were retained.
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
}

pub(crate) fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Little-endian writer for checkpoint files.
#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Row-major matrix payload (no shape prefix).
    pub fn matrix(&mut self, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }

    pub fn slice(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(invalid(format!(
                "checkpoint truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(invalid(format!(
                "bad checkpoint magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }

    pub fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(invalid(format!(
                "checkpoint has {} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
