//! Trainable SPD network: BiMap → ReEig blocks, a LogEig tangent projection
//! and a linear classifier on the half-vectorized log matrix.
//!
//! BiMap weights live on the Stiefel manifold. Their Euclidean gradients are
//! projected with `∇ = G − W·Gᵀ·W`, applied with a plain SGD step and mapped
//! back to orthonormal columns with Gram-Schmidt.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::tri_len;
use crate::linalg::{
    gram_schmidt, matfun_backprop, orthogonality_error, sym_eig, EigPair, SymMatrix,
};
use crate::nn::{
    accuracy, argmax, halfvec, halfvec_adjoint, softmax_cross_entropy, ByteReader, ByteWriter,
    EpochMetrics, LinearHead, TrainReport,
};
use crate::rng::{random_stiefel, seeded};

/// Orthogonality tolerance a Stiefel parameter must satisfy.
pub const STIEFEL_TOL: f64 = 1e-6;

/// Matrix with orthonormal columns (`c_in × c_out`, `c_out ≤ c_in`).
#[derive(Clone, Debug, PartialEq)]
pub struct StiefelParameter {
    w: DMatrix<f64>,
}

impl StiefelParameter {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.ncols() == 0 || w.ncols() > w.nrows() {
            return Err(invalid(format!(
                "Stiefel parameter must be tall, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        let err = orthogonality_error(&w);
        if !(err <= STIEFEL_TOL) {
            return Err(invalid(format!("columns are not orthonormal (‖WᵀW − I‖∞ = {err:e})")));
        }
        Ok(Self { w })
    }

    /// First `cols` columns of the identity.
    pub fn truncated_identity(rows: usize, cols: usize) -> Result<Self> {
        Self::new(DMatrix::identity(rows, cols))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn rows(&self) -> usize {
        self.w.nrows()
    }

    pub fn cols(&self) -> usize {
        self.w.ncols()
    }
}

/// `WᵀEW`.
pub fn bimap_forward(e: &SymMatrix, w: &StiefelParameter) -> Result<SymMatrix> {
    if e.dim() != w.rows() {
        return Err(invalid(format!(
            "BiMap expects a {0}x{0} input, got {1}x{1}",
            w.rows(),
            e.dim()
        )));
    }
    e.congruence(w.matrix())
}

fn reeig_with_pair(e: &SymMatrix, eps: f64) -> Result<(SymMatrix, EigPair)> {
    let pair = sym_eig(e)?;
    Ok((pair.map(|s| s.max(eps)), pair))
}

/// `U·max(εI, Σ)·Uᵀ`.
pub fn reeig_forward(e: &SymMatrix, eps: f64) -> Result<SymMatrix> {
    if !(eps > 0.0) {
        return Err(invalid(format!("ReEig threshold must be positive, got {eps}")));
    }
    Ok(reeig_with_pair(e, eps)?.0)
}

fn logeig_with_pair(e: &SymMatrix) -> Result<(SymMatrix, EigPair)> {
    let pair = sym_eig(e)?;
    if let Some((row, &pivot)) = pair.values.iter().enumerate().find(|(_, &s)| !(s > 0.0)) {
        return Err(Error::NotPositiveDefinite { row, pivot });
    }
    Ok((pair.map(f64::ln), pair))
}

/// Matrix logarithm `U·log(Σ)·Uᵀ`.
pub fn logeig_forward(e: &SymMatrix) -> Result<SymMatrix> {
    Ok(logeig_with_pair(e)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    BiMap(StiefelParameter),
    ReEig { eps: f64 },
    LogEig,
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Clone, Debug)]
pub enum LayerCache {
    BiMap { input: SymMatrix },
    ReEig { pair: EigPair, eps: f64 },
    LogEig { pair: EigPair },
}

impl Layer {
    pub fn forward(&self, x: &SymMatrix) -> Result<(SymMatrix, LayerCache)> {
        match self {
            Layer::BiMap(w) => Ok((bimap_forward(x, w)?, LayerCache::BiMap { input: x.clone() })),
            Layer::ReEig { eps } => {
                let (y, pair) = reeig_with_pair(x, *eps)?;
                Ok((y, LayerCache::ReEig { pair, eps: *eps }))
            }
            Layer::LogEig => {
                let (y, pair) = logeig_with_pair(x)?;
                Ok((y, LayerCache::LogEig { pair }))
            }
        }
    }
}

/// Gradient with respect to the layer input, plus the Euclidean gradient of
/// the BiMap weight when the layer has one.
pub fn layer_backward(
    layer: &Layer,
    cache: &LayerCache,
    g_out: &SymMatrix,
) -> Result<(SymMatrix, Option<DMatrix<f64>>)> {
    match (layer, cache) {
        (Layer::BiMap(w), LayerCache::BiMap { input }) => {
            let w = w.matrix();
            let g_in = SymMatrix::new(w * g_out.matrix() * w.transpose())?;
            let g_w = input.matrix() * w * g_out.matrix() * 2.0;
            Ok((g_in, Some(g_w)))
        }
        (Layer::ReEig { .. }, LayerCache::ReEig { pair, eps }) => {
            let eps = *eps;
            let g = matfun_backprop(
                pair,
                |s| s.max(eps),
                |s| if s > eps { 1.0 } else { 0.0 },
                g_out,
            )?;
            Ok((g, None))
        }
        (Layer::LogEig, LayerCache::LogEig { pair }) => {
            Ok((matfun_backprop(pair, f64::ln, |s| 1.0 / s, g_out)?, None))
        }
        _ => Err(invalid("layer_backward: cache does not belong to this layer")),
    }
}

/// Riemannian gradient on the Stiefel manifold, `G − W·Gᵀ·W`.
pub fn stiefel_grad(g_eucl: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    g_eucl - w * g_eucl.transpose() * w
}

/// `gram_schmidt(W − λ·grad)`.
pub fn stiefel_step(
    w: &StiefelParameter,
    grad: &DMatrix<f64>,
    lr: f64,
) -> Result<StiefelParameter> {
    if !(lr > 0.0) {
        return Err(invalid(format!("learning rate must be positive, got {lr}")));
    }
    if grad.shape() != w.w.shape() {
        return Err(invalid("stiefel_step: gradient shape differs from parameter"));
    }
    let moved = &w.w - grad * lr;
    StiefelParameter::new(gram_schmidt(&moved)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpdNetConfig {
    /// Matrix sizes along the BiMap chain, input first (`[22, 22]` is one
    /// square BiMap).
    pub dims: Vec<usize>,
    pub eps: f64,
    pub classes: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SpdNetConfig {
    fn default() -> Self {
        Self { dims: vec![22, 22], eps: 1e-4, classes: 26, learning_rate: 1e-2, epochs: 1000, seed: 0 }
    }
}

impl SpdNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(invalid("spdnet dims need an input size and at least one BiMap output"));
        }
        if self.dims.contains(&0) {
            return Err(invalid("spdnet dims must be positive"));
        }
        if self.dims.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid(format!("spdnet dims must be non-increasing, got {:?}", self.dims)));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("spdnet eps must be positive"));
        }
        if self.classes == 0 {
            return Err(invalid("spdnet needs at least one class"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("spdnet learning rate must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated")
    }

    pub fn parameter_count(&self) -> usize {
        let bimap: usize = self.dims.windows(2).map(|w| w[0] * w[1]).sum();
        bimap + self.classes * tri_len(self.output_dim()) + self.classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpdNetModel {
    pub config: SpdNetConfig,
    pub layers: Vec<Layer>,
    pub head: LinearHead,
}

/// Gradients of every trainable tensor, in declaration order.
#[derive(Clone, Debug)]
pub struct SpdNetGrads {
    /// Euclidean gradient of each BiMap weight.
    pub bimap: Vec<DMatrix<f64>>,
    pub head_weights: DMatrix<f64>,
    pub head_bias: DVector<f64>,
}

pub struct ForwardTrace {
    caches: Vec<LayerCache>,
    features: DVector<f64>,
    pub logits: DVector<f64>,
}

impl SpdNetModel {
    /// Random Stiefel BiMap weights and a Gaussian head, seeded from the
    /// config.
    pub fn new(config: SpdNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let mut layers = Vec::new();
        for w in config.dims.windows(2) {
            layers.push(Layer::BiMap(StiefelParameter::new(random_stiefel(&mut rng, w[0], w[1]))?));
            layers.push(Layer::ReEig { eps: config.eps });
        }
        layers.push(Layer::LogEig);
        let head = LinearHead::init(&mut rng, tri_len(config.output_dim()), config.classes);
        Ok(Self { config, layers, head })
    }

    pub fn parameter_count(&self) -> usize {
        let bimap: usize = self
            .bimaps()
            .map(|w| w.matrix().len())
            .sum();
        bimap + self.head.parameter_count()
    }

    pub fn bimaps(&self) -> impl Iterator<Item = &StiefelParameter> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BiMap(w) => Some(w),
            _ => None,
        })
    }

    /// The first BiMap weight (the learned basis used by the analyses).
    pub fn first_bimap(&self) -> &StiefelParameter {
        self.bimaps().next().expect("at least one BiMap")
    }

    pub fn forward_trace(&self, x: &SymMatrix) -> Result<ForwardTrace> {
        if x.dim() != self.config.input_dim() {
            return Err(invalid(format!(
                "spdnet expects {0}x{0} inputs, got {1}x{1}",
                self.config.input_dim(),
                x.dim()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&cur)?;
            caches.push(cache);
            cur = y;
        }
        let features = halfvec(&cur);
        let logits = self.head.forward(&features)?;
        Ok(ForwardTrace { caches, features, logits })
    }

    pub fn forward(&self, x: &SymMatrix) -> Result<DVector<f64>> {
        Ok(self.forward_trace(x)?.logits)
    }

    pub fn predict(&self, x: &SymMatrix) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn backward(&self, trace: &ForwardTrace, g_logits: &DVector<f64>) -> Result<SpdNetGrads> {
        let (g_feat, head_weights, head_bias) = self.head.backward(&trace.features, g_logits);
        let mut g = halfvec_adjoint(self.config.output_dim(), &g_feat);
        let mut bimap = Vec::new();
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            let (g_in, g_param) = layer_backward(layer, cache, &g)?;
            if let Some(gp) = g_param {
                bimap.push(gp);
            }
            g = g_in;
        }
        bimap.reverse();
        Ok(SpdNetGrads { bimap, head_weights, head_bias })
    }

    /// Mean cross-entropy over `batch`, its gradients, and the number of
    /// correctly classified samples.
    pub fn loss_and_grads(&self, batch: &[(SymMatrix, usize)]) -> Result<(f64, SpdNetGrads, usize)> {
        let mut total = 0.0;
        let mut hits = 0;
        let mut acc: Option<SpdNetGrads> = None;
        for (x, label) in batch {
            if *label >= self.config.classes {
                return Err(invalid(format!("label {label} outside {} classes", self.config.classes)));
            }
            let trace = self.forward_trace(x)?;
            if argmax(&trace.logits) == *label {
                hits += 1;
            }
            let (loss, g_logits) = softmax_cross_entropy(&trace.logits, *label);
            total += loss;
            let g = self.backward(&trace, &g_logits)?;
            acc = Some(match acc {
                None => g,
                Some(mut a) => {
                    for (ai, gi) in a.bimap.iter_mut().zip(&g.bimap) {
                        *ai += gi;
                    }
                    a.head_weights += &g.head_weights;
                    a.head_bias += &g.head_bias;
                    a
                }
            });
        }
        let n = batch.len().max(1) as f64;
        let mut g = acc.ok_or_else(|| invalid("empty batch"))?;
        for gi in g.bimap.iter_mut() {
            *gi /= n;
        }
        g.head_weights /= n;
        g.head_bias /= n;
        Ok((total / n, g, hits))
    }

    /// One SGD step: Stiefel retraction for BiMap weights, plain update for
    /// the head.
    pub fn apply_step(&mut self, grads: &SpdNetGrads, lr: f64) -> Result<()> {
        let mut k = 0;
        for layer in self.layers.iter_mut() {
            if let Layer::BiMap(w) = layer {
                let rg = stiefel_grad(&grads.bimap[k], w.matrix());
                *w = stiefel_step(w, &rg, lr)?;
                k += 1;
            }
        }
        self.head.weights -= &grads.head_weights * lr;
        self.head.bias -= &grads.head_bias * lr;
        Ok(())
    }

    pub fn evaluate(&self, data: &[(SymMatrix, usize)]) -> Result<f64> {
        let preds = data.iter().map(|(x, _)| self.predict(x)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
        Ok(accuracy(&preds, &labels))
    }

    pub const MAGIC: [u8; 4] = *b"SPDN";
    pub const VERSION: u32 = 1;

    /// Checkpoint layout (all little-endian):
    /// `"SPDN"`, `u32` version = 1, then the config block
    /// (`u32` dim count, that many `u32` dims, `f64` eps, `u32` classes,
    /// `f64` learning rate, `u32` epochs, `u64` seed), then `f64` tensors in
    /// declaration order: each BiMap weight row-major, head weights
    /// (`classes × d(d+1)/2`) row-major, head bias.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(&Self::MAGIC);
        w.u32(Self::VERSION);
        let c = &self.config;
        w.u32(c.dims.len() as u32);
        for &d in &c.dims {
            w.u32(d as u32);
        }
        w.f64(c.eps);
        w.u32(c.classes as u32);
        w.f64(c.learning_rate);
        w.u32(c.epochs as u32);
        w.u64(c.seed);
        for b in self.bimaps() {
            w.matrix(b.matrix());
        }
        w.matrix(&self.head.weights);
        w.slice(self.head.bias.as_slice());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(&Self::MAGIC)?;
        let version = r.u32()?;
        if version != Self::VERSION {
            return Err(invalid(format!("unsupported SPDN checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        if n > 64 {
            return Err(invalid(format!("implausible BiMap chain length {n}")));
        }
        let dims = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let config = SpdNetConfig {
            dims,
            eps: r.f64()?,
            classes: r.u32()? as usize,
            learning_rate: r.f64()?,
            epochs: r.u32()? as usize,
            seed: r.u64()?,
        };
        config.validate()?;
        let mut layers = Vec::new();
        for w in config.dims.windows(2) {
            layers.push(Layer::BiMap(StiefelParameter::new(r.matrix(w[0], w[1])?)?));
            layers.push(Layer::ReEig { eps: config.eps });
        }
        layers.push(Layer::LogEig);
        let width = tri_len(config.output_dim());
        let head = LinearHead {
            weights: r.matrix(config.classes, width)?,
            bias: DVector::from_vec(r.vec(config.classes)?),
        };
        r.finish()?;
        Ok(Self { config, layers, head })
    }
}

/// Full-batch training with softmax cross-entropy. Keeps the weights that
/// reached the best validation accuracy (earliest epoch on ties).
pub fn spdnet_train(
    config: &SpdNetConfig,
    train: &[(SymMatrix, usize)],
    validation: &[(SymMatrix, usize)],
) -> Result<(SpdNetModel, TrainReport)> {
    if train.is_empty() {
        return Err(invalid("spdnet_train: empty training set"));
    }
    if validation.iter().any(|(_, l)| *l >= config.classes) {
        return Err(invalid("spdnet_train: validation label outside class range"));
    }
    let mut model = SpdNetModel::new(config.clone())?;
    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (loss, grads, hits) = model.loss_and_grads(train)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        let val_acc = if validation.is_empty() {
            hits as f64 / train.len() as f64
        } else {
            model.evaluate(validation)?
        };
        if val_acc > best_acc {
            best_acc = val_acc;
            best = model.clone();
            best_epoch = epoch;
        }
        epochs.push(EpochMetrics {
            epoch,
            loss,
            train_accuracy: hits as f64 / train.len() as f64,
            validation_accuracy: val_acc,
        });
        model.apply_step(&grads, config.learning_rate)?;
    }
    if config.epochs == 0 {
        best_acc = if validation.is_empty() { 0.0 } else { model.evaluate(validation)? };
    }
    Ok((best, TrainReport { epochs, best_epoch, best_validation_accuracy: best_acc }))
}
