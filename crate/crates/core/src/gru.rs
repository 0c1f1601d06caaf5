//! Manifold GRU over sequences of SPD matrices.
//!
//! The hidden state is a Cholesky point handled through its split
//! `(⌊h⌋, log 𝔻(h))`. Gates act elementwise: the strictly lower part goes
//! through an ordinary affine + sigmoid/tanh path, the diagonal part through a
//! positive, log-linear path, so every intermediate stays a valid Cholesky
//! factor. Between steps the state is carried along a learned vector field in
//! the global log-Cholesky chart with fixed-step RK4.
//!
//! All derivatives are hand-written; [`GruModel::loss_and_grads`] backprops
//! through the unrolled RK4 stages.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    chart_exp, chart_log, lower_indices, strict_indices, strict_len, to_cholesky, tri_len,
    CholeskyPoint, TriangularTangent,
};
use crate::linalg::SymMatrix;
use crate::nn::{
    accuracy, argmax, softmax_cross_entropy, ByteReader, ByteWriter, EpochMetrics, LinearHead,
    TrainReport,
};
use crate::rng::{normal, random_stiefel, seeded, Pcg};
use crate::spdnet::{layer_backward, stiefel_grad, stiefel_step, Layer, LayerCache, StiefelParameter};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Cholesky point in split log coordinates: strictly lower entries
/// (row-major) and the log of the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitLog {
    pub strict: DVector<f64>,
    pub log_diag: DVector<f64>,
}

impl SplitLog {
    pub fn identity(dim: usize) -> Self {
        Self { strict: DVector::zeros(strict_len(dim)), log_diag: DVector::zeros(dim) }
    }

    pub fn from_point(p: &CholeskyPoint) -> Self {
        Self {
            strict: DVector::from_vec(p.strict_entries()),
            log_diag: DVector::from_vec(p.log_diag()),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_diag.len()
    }

    pub fn to_point(&self) -> Result<CholeskyPoint> {
        CholeskyPoint::from_parts(self.dim(), self.strict.as_slice(), self.log_diag.as_slice())
    }

    /// Chart coordinates flattened in lower-triangular row-major order, the
    /// same layout as [`TriangularTangent::to_vec`].
    pub fn pack(&self) -> DVector<f64> {
        let d = self.dim();
        let mut out = DVector::zeros(tri_len(d));
        let (mut s, mut k) = (0, 0);
        for (i, j) in lower_indices(d) {
            out[k] = if i == j { self.log_diag[i] } else {
                s += 1;
                self.strict[s - 1]
            };
            k += 1;
        }
        out
    }

    pub fn unpack(dim: usize, v: &DVector<f64>) -> Self {
        let mut out = Self::identity(dim);
        let mut s = 0;
        for (k, (i, j)) in lower_indices(dim).enumerate() {
            if i == j {
                out.log_diag[i] = v[k];
            } else {
                out.strict[s] = v[k];
                s += 1;
            }
        }
        out
    }

    fn zeros_like(&self) -> Self {
        Self::identity(self.dim())
    }

    /// Classifier features: [`pack`](Self::pack) with the strict entries
    /// scaled by `√2`, as in [`crate::nn::halfvec`].
    pub fn features(&self) -> DVector<f64> {
        let mut v = self.pack();
        for (k, (i, j)) in lower_indices(self.dim()).enumerate() {
            if i != j {
                v[k] *= std::f64::consts::SQRT_2;
            }
        }
        v
    }

    fn features_adjoint(dim: usize, g: &DVector<f64>) -> Self {
        let mut g = g.clone();
        for (k, (i, j)) in lower_indices(dim).enumerate() {
            if i != j {
                g[k] *= std::f64::consts::SQRT_2;
            }
        }
        Self::unpack(dim, &g)
    }
}

/// A triangular gate matrix: strict part and diagonal, entries in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub strict: DVector<f64>,
    pub diag: DVector<f64>,
}

impl Gate {
    pub fn constant(dim: usize, v: f64) -> Self {
        Self { strict: DVector::from_element(strict_len(dim), v), diag: DVector::from_element(dim, v) }
    }

    /// Assembled lower-triangular matrix (`combine` of the two parts).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let d = self.diag.len();
        let mut m = DMatrix::zeros(d, d);
        for ((i, j), &v) in strict_indices(d).zip(self.strict.iter()) {
            m[(i, j)] = v;
        }
        for i in 0..d {
            m[(i, i)] = self.diag[i];
        }
        m
    }
}

/// Elementwise coefficients of one gate. `beta` is the unconstrained
/// parameter behind the positive diagonal scale `b′ = softplus(beta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w_strict: DVector<f64>,
    pub u_strict: DVector<f64>,
    pub b_strict: DVector<f64>,
    pub w_diag: DVector<f64>,
    pub u_diag: DVector<f64>,
    pub beta: DVector<f64>,
}

impl GateParams {
    pub fn zeros(dim: usize) -> Self {
        let m = strict_len(dim);
        Self {
            w_strict: DVector::zeros(m),
            u_strict: DVector::zeros(m),
            b_strict: DVector::zeros(m),
            w_diag: DVector::zeros(dim),
            u_diag: DVector::zeros(dim),
            beta: DVector::zeros(dim),
        }
    }

    fn init(rng: &mut Pcg, dim: usize, scale: f64) -> Self {
        let m = strict_len(dim);
        let mut g = Self::zeros(dim);
        g.w_strict = DVector::from_fn(m, |_, _| scale * normal(rng));
        g.u_strict = DVector::from_fn(m, |_, _| scale * normal(rng));
        g.w_diag = DVector::from_fn(dim, |_, _| scale * normal(rng));
        g.u_diag = DVector::from_fn(dim, |_, _| scale * normal(rng));
        g.beta = DVector::from_element(dim, softplus_inv(1.0));
        g
    }

    /// Positive diagonal scale `b′`.
    pub fn diag_scale(&self) -> DVector<f64> {
        self.beta.map(softplus)
    }

    fn tensors(&self) -> [&DVector<f64>; 6] {
        [&self.w_strict, &self.u_strict, &self.b_strict, &self.w_diag, &self.u_diag, &self.beta]
    }

    fn tensors_mut(&mut self) -> [&mut DVector<f64>; 6] {
        [
            &mut self.w_strict,
            &mut self.u_strict,
            &mut self.b_strict,
            &mut self.w_diag,
            &mut self.u_diag,
            &mut self.beta,
        ]
    }

    fn check(&self, dim: usize) -> Result<()> {
        let m = strict_len(dim);
        let ok = self.w_strict.len() == m
            && self.u_strict.len() == m
            && self.b_strict.len() == m
            && self.w_diag.len() == dim
            && self.u_diag.len() == dim
            && self.beta.len() == dim;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("gate parameters do not match hidden dim {dim}")))
        }
    }
}

/// Parameters of the update, reset and candidate paths.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub update: GateParams,
    pub reset: GateParams,
    pub candidate: GateParams,
}

impl GruParams {
    pub fn zeros(dim: usize) -> Self {
        Self { update: GateParams::zeros(dim), reset: GateParams::zeros(dim), candidate: GateParams::zeros(dim) }
    }

    pub fn init(rng: &mut Pcg, dim: usize) -> Self {
        Self {
            update: GateParams::init(rng, dim, 0.1),
            reset: GateParams::init(rng, dim, 0.1),
            candidate: GateParams::init(rng, dim, 0.1),
        }
    }

    pub fn parameter_count(dim: usize) -> usize {
        9 * tri_len(dim)
    }

    fn gates(&self) -> [&GateParams; 3] {
        [&self.update, &self.reset, &self.candidate]
    }

    fn gates_mut(&mut self) -> [&mut GateParams; 3] {
        [&mut self.update, &mut self.reset, &mut self.candidate]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.gates()
            .iter()
            .flat_map(|g| g.tensors().into_iter().flat_map(|t| t.iter().copied()))
            .collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut it = v.iter();
        for g in self.gates_mut() {
            for t in g.tensors_mut() {
                for x in t.iter_mut() {
                    *x = *it.next().expect("flat parameter vector too short");
                }
            }
        }
    }

    fn axpy(&mut self, a: f64, o: &GruParams) {
        for (g, og) in self.gates_mut().into_iter().zip(o.gates()) {
            for (t, ot) in g.tensors_mut().into_iter().zip(og.tensors()) {
                t.axpy(a, ot, 1.0);
            }
        }
    }
}

struct GateCache {
    gate: Gate,
    expo: DVector<f64>,
}

fn gate_forward(l: &SplitLog, h: &SplitLog, p: &GateParams) -> GateCache {
    let pre_s = p.w_strict.component_mul(&l.strict) + p.u_strict.component_mul(&h.strict) + &p.b_strict;
    let q = p.w_diag.component_mul(&l.log_diag) + p.u_diag.component_mul(&h.log_diag);
    let expo = q.map(f64::exp);
    let pre_d = p.diag_scale().component_mul(&expo);
    GateCache { gate: Gate { strict: pre_s.map(sigmoid), diag: pre_d.map(sigmoid) }, expo }
}

fn check_pair(l: &CholeskyPoint, h: &CholeskyPoint, p: &GateParams) -> Result<()> {
    if l.dim() != h.dim() {
        return Err(invalid(format!("gate inputs differ in dim: {} vs {}", l.dim(), h.dim())));
    }
    p.check(l.dim())
}

/// Update gate `z_t`.
pub fn gate_z(l: &CholeskyPoint, h_prev: &CholeskyPoint, params: &GruParams) -> Result<Gate> {
    check_pair(l, h_prev, &params.update)?;
    Ok(gate_forward(&SplitLog::from_point(l), &SplitLog::from_point(h_prev), &params.update).gate)
}

/// Reset gate `r_t`.
pub fn gate_r(l: &CholeskyPoint, h_prev: &CholeskyPoint, params: &GruParams) -> Result<Gate> {
    check_pair(l, h_prev, &params.reset)?;
    Ok(gate_forward(&SplitLog::from_point(l), &SplitLog::from_point(h_prev), &params.reset).gate)
}

/// Accumulates parameter gradients into `gp` and input gradients into
/// `gl`/`gh`.
fn gate_backward(
    l: &SplitLog,
    h: &SplitLog,
    p: &GateParams,
    c: &GateCache,
    g: &Gate,
    gp: &mut GateParams,
    gl: &mut SplitLog,
    gh: &mut SplitLog,
) {
    let dpre_s = g.strict.zip_map(&c.gate.strict, |gv, s| gv * s * (1.0 - s));
    gp.w_strict += dpre_s.component_mul(&l.strict);
    gp.u_strict += dpre_s.component_mul(&h.strict);
    gp.b_strict += &dpre_s;
    gl.strict += dpre_s.component_mul(&p.w_strict);
    gh.strict += dpre_s.component_mul(&p.u_strict);

    let dpre_d = g.diag.zip_map(&c.gate.diag, |gv, s| gv * s * (1.0 - s));
    let scale = p.diag_scale();
    gp.beta += dpre_d.component_mul(&c.expo).component_mul(&p.beta.map(sigmoid));
    let dq = dpre_d.component_mul(&scale).component_mul(&c.expo);
    gp.w_diag += dq.component_mul(&l.log_diag);
    gp.u_diag += dq.component_mul(&h.log_diag);
    gl.log_diag += dq.component_mul(&p.w_diag);
    gh.log_diag += dq.component_mul(&p.u_diag);
}

struct CandidateCache {
    out: SplitLog,
    strict_act: DVector<f64>,
    expo: DVector<f64>,
    arg: DVector<f64>,
    diag: DVector<f64>,
    mixed_log: DVector<f64>,
}

fn candidate_forward(l: &SplitLog, r: &Gate, h: &SplitLog, p: &GateParams) -> CandidateCache {
    let reset_strict = r.strict.component_mul(&h.strict);
    let pre_s = p.w_strict.component_mul(&l.strict) + p.u_strict.component_mul(&reset_strict) + &p.b_strict;
    let strict_act = pre_s.map(f64::tanh);
    let mixed_log = r.diag.map(f64::ln) + &h.log_diag;
    let q = p.w_diag.component_mul(&l.log_diag) + p.u_diag.component_mul(&mixed_log);
    let expo = q.map(f64::exp);
    let arg = p.diag_scale().component_mul(&expo);
    let diag = arg.map(softplus);
    CandidateCache {
        out: SplitLog { strict: strict_act.clone(), log_diag: diag.map(f64::ln) },
        strict_act,
        expo,
        arg,
        diag,
        mixed_log,
    }
}

/// Candidate activation `ĥ_t`.
pub fn candidate(
    l: &CholeskyPoint,
    r: &Gate,
    h_prev: &CholeskyPoint,
    params: &GruParams,
) -> Result<CholeskyPoint> {
    check_pair(l, h_prev, &params.candidate)?;
    if r.diag.len() != l.dim() || r.strict.len() != strict_len(l.dim()) {
        return Err(invalid("reset gate does not match the hidden dim"));
    }
    let c = candidate_forward(&SplitLog::from_point(l), r, &SplitLog::from_point(h_prev), &params.candidate);
    // assemble from the positive diagonal directly rather than exp(log(·))
    let d = l.dim();
    let mut m = DMatrix::zeros(d, d);
    for ((i, j), &v) in strict_indices(d).zip(c.strict_act.iter()) {
        m[(i, j)] = v;
    }
    for i in 0..d {
        m[(i, i)] = c.diag[i];
    }
    CholeskyPoint::new(m)
}

#[allow(clippy::too_many_arguments)]
fn candidate_backward(
    l: &SplitLog,
    r: &Gate,
    h: &SplitLog,
    p: &GateParams,
    c: &CandidateCache,
    g_out: &SplitLog,
    gp: &mut GateParams,
    gl: &mut SplitLog,
    gr: &mut Gate,
    gh: &mut SplitLog,
) {
    let dpre_s = g_out.strict.zip_map(&c.strict_act, |gv, a| gv * (1.0 - a * a));
    let reset_strict = r.strict.component_mul(&h.strict);
    gp.w_strict += dpre_s.component_mul(&l.strict);
    gp.u_strict += dpre_s.component_mul(&reset_strict);
    gp.b_strict += &dpre_s;
    gl.strict += dpre_s.component_mul(&p.w_strict);
    let d_reset = dpre_s.component_mul(&p.u_strict);
    gr.strict += d_reset.component_mul(&h.strict);
    gh.strict += d_reset.component_mul(&r.strict);

    // log-diagonal output: d(log softplus(arg)) = sigmoid(arg)/softplus(arg)
    let darg = g_out.log_diag.zip_map(&c.diag, |gv, dv| gv / dv).component_mul(&c.arg.map(sigmoid));
    let scale = p.diag_scale();
    gp.beta += darg.component_mul(&c.expo).component_mul(&p.beta.map(sigmoid));
    let dq = darg.component_mul(&scale).component_mul(&c.expo);
    gp.w_diag += dq.component_mul(&l.log_diag);
    gp.u_diag += dq.component_mul(&c.mixed_log);
    gl.log_diag += dq.component_mul(&p.w_diag);
    let dmixed = dq.component_mul(&p.u_diag);
    gr.diag += dmixed.zip_map(&r.diag, |gv, rv| gv / rv);
    gh.log_diag += &dmixed;
}

fn combine_forward(z: &Gate, cand: &SplitLog, h: &SplitLog) -> SplitLog {
    SplitLog {
        strict: z.strict.zip_zip_map(&h.strict, &cand.strict, |zv, hv, cv| (1.0 - zv) * hv + zv * cv),
        log_diag: z.diag.zip_zip_map(&h.log_diag, &cand.log_diag, |zv, hv, cv| (1.0 - zv) * hv + zv * cv),
    }
}

/// Output `h_t`: convex blend of the strict parts and geometric blend of the
/// diagonals.
pub fn output_combine(z: &Gate, cand: &CholeskyPoint, h_prev: &CholeskyPoint) -> Result<CholeskyPoint> {
    let d = h_prev.dim();
    if cand.dim() != d || z.diag.len() != d || z.strict.len() != strict_len(d) {
        return Err(invalid("output_combine: inconsistent dimensions"));
    }
    let hs = SplitLog::from_point(h_prev);
    let cs = SplitLog::from_point(cand);
    let out = combine_forward(z, &cs, &hs);
    // the endpoints are reproduced exactly from the inputs
    let mut m = DMatrix::zeros(d, d);
    for ((i, j), &v) in strict_indices(d).zip(out.strict.iter()) {
        m[(i, j)] = v;
    }
    for i in 0..d {
        m[(i, i)] = match z.diag[i] {
            0.0 => h_prev.matrix()[(i, i)],
            1.0 => cand.matrix()[(i, i)],
            _ => out.log_diag[i].exp(),
        };
    }
    CholeskyPoint::new(m)
}

fn combine_backward(
    z: &Gate,
    cand: &SplitLog,
    h: &SplitLog,
    g_out: &SplitLog,
    gz: &mut Gate,
    gc: &mut SplitLog,
    gh: &mut SplitLog,
) {
    gz.strict += g_out.strict.component_mul(&(&cand.strict - &h.strict));
    gc.strict += g_out.strict.component_mul(&z.strict);
    gh.strict += g_out.strict.zip_map(&z.strict, |gv, zv| gv * (1.0 - zv));
    gz.diag += g_out.log_diag.component_mul(&(&cand.log_diag - &h.log_diag));
    gc.log_diag += g_out.log_diag.component_mul(&z.diag);
    gh.log_diag += g_out.log_diag.zip_map(&z.diag, |gv, zv| gv * (1.0 - zv));
}

/// Classic fixed-step RK4 for an autonomous field.
pub fn rk4_integrate(
    field: impl Fn(&DVector<f64>) -> DVector<f64>,
    x0: &DVector<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<DVector<f64>> {
    if steps == 0 {
        return Err(invalid("RK4 needs at least one step"));
    }
    let h = (t1 - t0) / steps as f64;
    let mut x = x0.clone();
    for step in 0..steps {
        let k1 = field(&x);
        let k2 = field(&(&x + &k1 * (h / 2.0)));
        let k3 = field(&(&x + &k2 * (h / 2.0)));
        let k4 = field(&(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::OdeDiverged { step });
        }
    }
    Ok(x)
}

/// Two-layer tanh perceptron on chart coordinates,
/// `f(x) = W₂·tanh(W₁x + b₁) + b₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeField {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl OdeField {
    pub fn zeros(width: usize, hidden: usize) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, width),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(width, hidden),
            b2: DVector::zeros(width),
        }
    }

    pub fn init(rng: &mut Pcg, width: usize, hidden: usize) -> Self {
        let s1 = 1.0 / (width as f64).sqrt();
        let s2 = 0.1 / (hidden as f64).sqrt();
        Self {
            w1: DMatrix::from_fn(hidden, width, |_, _| s1 * normal(rng)),
            b1: DVector::zeros(hidden),
            w2: DMatrix::from_fn(width, hidden, |_, _| s2 * normal(rng)),
            b2: DVector::zeros(width),
        }
    }

    pub fn width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn parameter_count(width: usize, hidden: usize) -> usize {
        2 * width * hidden + hidden + width
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        self.eval_cached(x).0
    }

    fn eval_cached(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let act = (&self.w1 * x + &self.b1).map(f64::tanh);
        (&self.w2 * &act + &self.b2, act)
    }

    /// Vector-Jacobian product at `x` (with cached hidden activation);
    /// accumulates parameter gradients into `grad`.
    fn vjp(&self, x: &DVector<f64>, act: &DVector<f64>, gy: &DVector<f64>, grad: &mut OdeField) -> DVector<f64> {
        grad.w2 += gy * act.transpose();
        grad.b2 += gy;
        let dpre = (self.w2.transpose() * gy).zip_map(act, |g, a| g * (1.0 - a * a));
        grad.w1 += &dpre * x.transpose();
        grad.b1 += &dpre;
        self.w1.transpose() * dpre
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [self.w1.as_mut_slice(), self.b1.as_mut_slice(), self.w2.as_mut_slice(), self.b2.as_mut_slice()]
    }

    /// `W₁, b₁, W₂, b₂` concatenated, matrices column-major.
    pub fn to_flat(&self) -> Vec<f64> {
        [self.w1.as_slice(), self.b1.as_slice(), self.w2.as_slice(), self.b2.as_slice()].concat()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&v[off..off + n]);
            off += n;
        }
    }

    fn axpy(&mut self, a: f64, o: &OdeField) {
        self.w1 += &o.w1 * a;
        self.b1.axpy(a, &o.b1, 1.0);
        self.w2 += &o.w2 * a;
        self.b2.axpy(a, &o.b2, 1.0);
    }
}

/// One RK4 step's stage inputs and hidden activations.
struct Rk4Stage {
    inputs: [DVector<f64>; 4],
    acts: [DVector<f64>; 4],
}

struct Rk4Tape {
    h: f64,
    stages: Vec<Rk4Stage>,
}

fn rk4_forward(field: &OdeField, x0: &DVector<f64>, t0: f64, t1: f64, steps: usize) -> Result<(DVector<f64>, Rk4Tape)> {
    if steps == 0 {
        return Err(invalid("ODE solver needs at least one step"));
    }
    let h = (t1 - t0) / steps as f64;
    let mut x = x0.clone();
    let mut stages = Vec::with_capacity(steps);
    for step in 0..steps {
        let in1 = x.clone();
        let (k1, a1) = field.eval_cached(&in1);
        let in2 = &x + &k1 * (h / 2.0);
        let (k2, a2) = field.eval_cached(&in2);
        let in3 = &x + &k2 * (h / 2.0);
        let (k3, a3) = field.eval_cached(&in3);
        let in4 = &x + &k3 * h;
        let (k4, a4) = field.eval_cached(&in4);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::OdeDiverged { step });
        }
        stages.push(Rk4Stage { inputs: [in1, in2, in3, in4], acts: [a1, a2, a3, a4] });
    }
    Ok((x, Rk4Tape { h, stages }))
}

fn rk4_backward(field: &OdeField, tape: &Rk4Tape, g_end: &DVector<f64>, grad: &mut OdeField) -> DVector<f64> {
    let h = tape.h;
    let mut gx = g_end.clone();
    for st in tape.stages.iter().rev() {
        let gk4 = &gx * (h / 6.0);
        let mut gk3 = &gx * (h / 3.0);
        let mut gk2 = &gx * (h / 3.0);
        let mut gk1 = &gx * (h / 6.0);
        let g4 = field.vjp(&st.inputs[3], &st.acts[3], &gk4, grad);
        gx += &g4;
        gk3.axpy(h, &g4, 1.0);
        let g3 = field.vjp(&st.inputs[2], &st.acts[2], &gk3, grad);
        gx += &g3;
        gk2.axpy(h / 2.0, &g3, 1.0);
        let g2 = field.vjp(&st.inputs[1], &st.acts[1], &gk2, grad);
        gx += &g2;
        gk1.axpy(h / 2.0, &g2, 1.0);
        gx += field.vjp(&st.inputs[0], &st.acts[0], &gk1, grad);
    }
    gx
}

/// Carries `h` along `field` from `t0` to `t1` in the log-Cholesky chart.
pub fn ode_evolve(h: &CholeskyPoint, field: &OdeField, t0: f64, t1: f64, steps: usize) -> Result<CholeskyPoint> {
    let d = h.dim();
    if field.width() != tri_len(d) {
        return Err(invalid(format!(
            "ODE field width {} does not match {} chart coordinates",
            field.width(),
            tri_len(d)
        )));
    }
    let x0 = DVector::from_vec(chart_log(h).to_vec());
    let x1 = rk4_integrate(|x| field.eval(x), &x0, t0, t1, steps)?;
    let p = chart_exp(&TriangularTangent::from_vec(d, x1.as_slice())?);
    CholeskyPoint::new(p.matrix().clone())
}

/// Pullback of a gate evaluated in split coordinates: returns gradients with
/// respect to `l`, `h` and the gate's parameters, given the gradient `g` of
/// its output.
pub fn gate_vjp(l: &SplitLog, h: &SplitLog, params: &GateParams, g: &Gate) -> (SplitLog, SplitLog, GateParams) {
    let cache = gate_forward(l, h, params);
    let (mut gl, mut gh) = (l.zeros_like(), l.zeros_like());
    let mut gp = GateParams::zeros(l.dim());
    gate_backward(l, h, params, &cache, g, &mut gp, &mut gl, &mut gh);
    (gl, gh, gp)
}

/// Gate output in split coordinates (same values as [`gate_z`]/[`gate_r`]).
pub fn gate_eval(l: &SplitLog, h: &SplitLog, params: &GateParams) -> Gate {
    gate_forward(l, h, params).gate
}

/// Candidate in split coordinates: strict part and log-diagonal.
pub fn candidate_eval(l: &SplitLog, r: &Gate, h: &SplitLog, params: &GateParams) -> SplitLog {
    candidate_forward(l, r, h, params).out
}

/// Pullback of [`candidate_eval`]; returns gradients for `l`, `r`, `h` and
/// the parameters.
pub fn candidate_vjp(
    l: &SplitLog,
    r: &Gate,
    h: &SplitLog,
    params: &GateParams,
    g: &SplitLog,
) -> (SplitLog, Gate, SplitLog, GateParams) {
    let cache = candidate_forward(l, r, h, params);
    let (mut gl, mut gh) = (l.zeros_like(), l.zeros_like());
    let mut gr = Gate::constant(l.dim(), 0.0);
    let mut gp = GateParams::zeros(l.dim());
    candidate_backward(l, r, h, params, &cache, g, &mut gp, &mut gl, &mut gr, &mut gh);
    (gl, gr, gh, gp)
}

/// Output blend in split coordinates.
pub fn output_combine_eval(z: &Gate, cand: &SplitLog, h: &SplitLog) -> SplitLog {
    combine_forward(z, cand, h)
}

/// Pullback of [`output_combine_eval`]; returns gradients for `z`, the
/// candidate and `h`.
pub fn output_combine_vjp(z: &Gate, cand: &SplitLog, h: &SplitLog, g: &SplitLog) -> (Gate, SplitLog, SplitLog) {
    let mut gz = Gate::constant(h.dim(), 0.0);
    let (mut gc, mut gh) = (h.zeros_like(), h.zeros_like());
    combine_backward(z, cand, h, g, &mut gz, &mut gc, &mut gh);
    (gz, gc, gh)
}

/// Pullback of the RK4 flow on chart coordinates: returns the gradient with
/// respect to the initial coordinates and the field parameters.
pub fn ode_evolve_vjp(
    x0: &DVector<f64>,
    field: &OdeField,
    t0: f64,
    t1: f64,
    steps: usize,
    g_end: &DVector<f64>,
) -> Result<(DVector<f64>, OdeField)> {
    let (_, tape) = rk4_forward(field, x0, t0, t1, steps)?;
    let mut grad = OdeField::zeros(field.width(), field.hidden());
    let gx = rk4_backward(field, &tape, g_end, &mut grad);
    Ok((gx, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GruModelConfig {
    /// BiMap chain of the front-end, input size first. The last entry is the
    /// hidden SPD dimension.
    pub frontend_dims: Vec<usize>,
    pub eps: f64,
    pub ode_hidden: usize,
    /// RK4 steps per unit time between consecutive inputs.
    pub ode_steps: usize,
    pub classes: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GruModelConfig {
    fn default() -> Self {
        Self {
            frontend_dims: vec![22, 22],
            eps: 1e-4,
            ode_hidden: 280,
            ode_steps: 10,
            classes: 26,
            learning_rate: 1e-2,
            epochs: 150,
            seed: 0,
        }
    }
}

impl GruModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frontend_dims.len() < 2 || self.frontend_dims.contains(&0) {
            return Err(invalid("gru frontend dims need an input size and at least one positive BiMap output"));
        }
        if self.frontend_dims.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("gru frontend dims must be non-increasing"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("gru eps must be positive"));
        }
        if self.ode_hidden == 0 || self.ode_steps == 0 {
            return Err(invalid("gru ODE width and step count must be positive"));
        }
        if self.classes == 0 {
            return Err(invalid("gru needs at least one class"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("gru learning rate must be positive"));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        *self.frontend_dims.last().expect("validated")
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.hidden_dim();
        let frontend: usize = self.frontend_dims.windows(2).map(|w| w[0] * w[1]).sum();
        frontend
            + GruParams::parameter_count(d)
            + OdeField::parameter_count(tri_len(d), self.ode_hidden)
            + self.classes * tri_len(d)
            + self.classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruModel {
    pub config: GruModelConfig,
    pub frontend: Vec<Layer>,
    pub cell: GruParams,
    pub field: OdeField,
    pub head: LinearHead,
}

#[derive(Clone, Debug)]
pub struct GruGrads {
    /// Euclidean gradients of the front-end BiMap weights.
    pub frontend: Vec<DMatrix<f64>>,
    pub cell: GruParams,
    pub field: OdeField,
    pub head_weights: DMatrix<f64>,
    pub head_bias: DVector<f64>,
}

struct StepTape {
    frontend: Vec<LayerCache>,
    chol: DMatrix<f64>,
    input: SplitLog,
    ode: Rk4Tape,
    evolved: SplitLog,
    z: GateCache,
    r: GateCache,
    cand: CandidateCache,
}

pub struct SequenceTrace {
    steps: Vec<StepTape>,
    features: DVector<f64>,
    pub logits: DVector<f64>,
    /// Hidden state after every step.
    pub states: Vec<SplitLog>,
}

/// Gradient of a loss with respect to the SPD input `X = L·Lᵀ`, given its
/// gradient with respect to the Cholesky factor `L`.
pub fn cholesky_backward(l: &DMatrix<f64>, g_l: &DMatrix<f64>) -> Result<SymMatrix> {
    let d = l.nrows();
    let mut phi = l.transpose() * g_l;
    for i in 0..d {
        for j in i + 1..d {
            phi[(i, j)] = 0.0;
        }
        phi[(i, i)] *= 0.5;
    }
    let l_inv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| invalid("cholesky_backward: singular factor"))?;
    SymMatrix::new(l_inv.transpose() * phi * l_inv)
}

impl GruModel {
    pub fn new(config: GruModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let mut frontend = Vec::new();
        for w in config.frontend_dims.windows(2) {
            frontend.push(Layer::BiMap(StiefelParameter::new(random_stiefel(&mut rng, w[0], w[1]))?));
            frontend.push(Layer::ReEig { eps: config.eps });
        }
        let d = config.hidden_dim();
        let cell = GruParams::init(&mut rng, d);
        let field = OdeField::init(&mut rng, tri_len(d), config.ode_hidden);
        let head = LinearHead::init(&mut rng, tri_len(d), config.classes);
        Ok(Self { config, frontend, cell, field, head })
    }

    pub fn parameter_count(&self) -> usize {
        let frontend: usize = self.bimaps().map(|w| w.matrix().len()).sum();
        let d = self.config.hidden_dim();
        frontend
            + GruParams::parameter_count(d)
            + OdeField::parameter_count(self.field.width(), self.field.hidden())
            + self.head.parameter_count()
    }

    pub fn bimaps(&self) -> impl Iterator<Item = &StiefelParameter> {
        self.frontend.iter().filter_map(|l| match l {
            Layer::BiMap(w) => Some(w),
            _ => None,
        })
    }

    pub fn forward_trace(&self, seq: &[SymMatrix]) -> Result<SequenceTrace> {
        if seq.is_empty() {
            return Err(invalid("gru forward: empty sequence"));
        }
        let d = self.config.hidden_dim();
        let mut h = SplitLog::identity(d);
        let mut steps = Vec::with_capacity(seq.len());
        let mut states = Vec::with_capacity(seq.len());
        for e in seq {
            if e.dim() != self.config.frontend_dims[0] {
                return Err(invalid(format!(
                    "gru expects {0}x{0} inputs, got {1}x{1}",
                    self.config.frontend_dims[0],
                    e.dim()
                )));
            }
            let mut caches = Vec::with_capacity(self.frontend.len());
            let mut x = e.clone();
            for layer in &self.frontend {
                let (y, cache) = layer.forward(&x)?;
                caches.push(cache);
                x = y;
            }
            let lp = to_cholesky(&x)?;
            let input = SplitLog::from_point(&lp);
            let (x1, ode) = rk4_forward(&self.field, &h.pack(), 0.0, 1.0, self.config.ode_steps)?;
            let evolved = SplitLog::unpack(d, &x1);
            let z = gate_forward(&input, &evolved, &self.cell.update);
            let r = gate_forward(&input, &evolved, &self.cell.reset);
            let cand = candidate_forward(&input, &r.gate, &evolved, &self.cell.candidate);
            h = combine_forward(&z.gate, &cand.out, &evolved);
            states.push(h.clone());
            steps.push(StepTape { frontend: caches, chol: lp.matrix().clone(), input, ode, evolved, z, r, cand });
        }
        let features = h.features();
        let logits = self.head.forward(&features)?;
        Ok(SequenceTrace { steps, features, logits, states })
    }

    pub fn forward(&self, seq: &[SymMatrix]) -> Result<DVector<f64>> {
        Ok(self.forward_trace(seq)?.logits)
    }

    pub fn predict(&self, seq: &[SymMatrix]) -> Result<usize> {
        Ok(argmax(&self.forward(seq)?))
    }

    fn zero_grads(&self) -> GruGrads {
        let d = self.config.hidden_dim();
        GruGrads {
            frontend: self.bimaps().map(|w| DMatrix::zeros(w.rows(), w.cols())).collect(),
            cell: GruParams::zeros(d),
            field: OdeField::zeros(self.field.width(), self.field.hidden()),
            head_weights: DMatrix::zeros(self.head.classes(), self.head.inputs()),
            head_bias: DVector::zeros(self.head.classes()),
        }
    }

    /// Backpropagates `g_logits` through the whole unrolled sequence,
    /// accumulating into `grads`.
    fn backward_into(&self, trace: &SequenceTrace, g_logits: &DVector<f64>, grads: &mut GruGrads) -> Result<()> {
        let d = self.config.hidden_dim();
        let (g_feat, gw, gb) = self.head.backward(&trace.features, g_logits);
        grads.head_weights += gw;
        grads.head_bias += gb;
        let mut gh = SplitLog::features_adjoint(d, &g_feat);
        for st in trace.steps.iter().rev() {
            let mut g_evolved = gh.zeros_like();
            let mut g_input = gh.zeros_like();
            let mut gz = Gate::constant(d, 0.0);
            let mut gr = Gate::constant(d, 0.0);
            let mut gc = gh.zeros_like();
            combine_backward(&st.z.gate, &st.cand.out, &st.evolved, &gh, &mut gz, &mut gc, &mut g_evolved);
            candidate_backward(
                &st.input,
                &st.r.gate,
                &st.evolved,
                &self.cell.candidate,
                &st.cand,
                &gc,
                &mut grads.cell.candidate,
                &mut g_input,
                &mut gr,
                &mut g_evolved,
            );
            gate_backward(&st.input, &st.evolved, &self.cell.reset, &st.r, &gr, &mut grads.cell.reset, &mut g_input, &mut g_evolved);
            gate_backward(&st.input, &st.evolved, &self.cell.update, &st.z, &gz, &mut grads.cell.update, &mut g_input, &mut g_evolved);

            let g_prev = rk4_backward(&self.field, &st.ode, &g_evolved.pack(), &mut grads.field);
            gh = SplitLog::unpack(d, &g_prev);

            // input split coordinates -> Cholesky factor -> SPD input
            let mut g_l = DMatrix::zeros(d, d);
            for ((i, j), &v) in strict_indices(d).zip(g_input.strict.iter()) {
                g_l[(i, j)] = v;
            }
            for i in 0..d {
                g_l[(i, i)] = g_input.log_diag[i] / st.chol[(i, i)];
            }
            let mut g = cholesky_backward(&st.chol, &g_l)?;
            let mut k = grads.frontend.len();
            for (layer, cache) in self.frontend.iter().zip(&st.frontend).rev() {
                let (g_in, gp) = layer_backward(layer, cache, &g)?;
                if let Some(gp) = gp {
                    k -= 1;
                    grads.frontend[k] += gp;
                }
                g = g_in;
            }
        }
        Ok(())
    }

    /// Gradients of the cross-entropy of a single sequence.
    pub fn sequence_grads(&self, seq: &[SymMatrix], label: usize) -> Result<(f64, GruGrads)> {
        let trace = self.forward_trace(seq)?;
        let (loss, g_logits) = softmax_cross_entropy(&trace.logits, label);
        let mut grads = self.zero_grads();
        self.backward_into(&trace, &g_logits, &mut grads)?;
        Ok((loss, grads))
    }

    /// Mean cross-entropy over `batch`, gradients, and correct count.
    pub fn loss_and_grads(&self, batch: &[(Vec<SymMatrix>, usize)]) -> Result<(f64, GruGrads, usize)> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        let mut hits = 0;
        for (seq, label) in batch {
            if *label >= self.config.classes {
                return Err(invalid(format!("label {label} outside {} classes", self.config.classes)));
            }
            let trace = self.forward_trace(seq)?;
            if argmax(&trace.logits) == *label {
                hits += 1;
            }
            let (loss, g_logits) = softmax_cross_entropy(&trace.logits, *label);
            total += loss;
            self.backward_into(&trace, &g_logits, &mut grads)?;
        }
        let s = 1.0 / batch.len() as f64;
        for g in grads.frontend.iter_mut() {
            *g *= s;
        }
        let mut cell = GruParams::zeros(self.config.hidden_dim());
        cell.axpy(s, &grads.cell);
        grads.cell = cell;
        let mut field = OdeField::zeros(self.field.width(), self.field.hidden());
        field.axpy(s, &grads.field);
        grads.field = field;
        grads.head_weights *= s;
        grads.head_bias *= s;
        Ok((total * s, grads, hits))
    }

    pub fn apply_step(&mut self, grads: &GruGrads, lr: f64) -> Result<()> {
        let mut k = 0;
        for layer in self.frontend.iter_mut() {
            if let Layer::BiMap(w) = layer {
                let rg = stiefel_grad(&grads.frontend[k], w.matrix());
                *w = stiefel_step(w, &rg, lr)?;
                k += 1;
            }
        }
        self.cell.axpy(-lr, &grads.cell);
        self.field.axpy(-lr, &grads.field);
        self.head.weights -= &grads.head_weights * lr;
        self.head.bias -= &grads.head_bias * lr;
        Ok(())
    }

    pub fn evaluate(&self, data: &[(Vec<SymMatrix>, usize)]) -> Result<f64> {
        let preds = data.iter().map(|(s, _)| self.predict(s)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
        Ok(accuracy(&preds, &labels))
    }

    pub const MAGIC: [u8; 4] = *b"SPDG";
    pub const VERSION: u32 = 1;

    /// Checkpoint layout (little-endian): `"SPDG"`, `u32` version = 1, config
    /// block (`u32` front-end dim count, the `u32` dims, `f64` eps, `u32` ODE
    /// width, `u32` ODE steps, `u32` classes, `f64` learning rate, `u32`
    /// epochs, `u64` seed), then `f64` tensors in declaration order:
    /// front-end BiMap weights (row-major); update, reset and candidate gate
    /// vectors (each `w_strict, u_strict, b_strict, w_diag, u_diag, beta`);
    /// ODE `W₁, b₁, W₂, b₂` (matrices row-major); head weights and bias.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(&Self::MAGIC);
        w.u32(Self::VERSION);
        let c = &self.config;
        w.u32(c.frontend_dims.len() as u32);
        for &d in &c.frontend_dims {
            w.u32(d as u32);
        }
        w.f64(c.eps);
        w.u32(c.ode_hidden as u32);
        w.u32(c.ode_steps as u32);
        w.u32(c.classes as u32);
        w.f64(c.learning_rate);
        w.u32(c.epochs as u32);
        w.u64(c.seed);
        for b in self.bimaps() {
            w.matrix(b.matrix());
        }
        w.slice(&self.cell.to_flat());
        w.matrix(&self.field.w1);
        w.slice(self.field.b1.as_slice());
        w.matrix(&self.field.w2);
        w.slice(self.field.b2.as_slice());
        w.matrix(&self.head.weights);
        w.slice(self.head.bias.as_slice());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(&Self::MAGIC)?;
        let version = r.u32()?;
        if version != Self::VERSION {
            return Err(invalid(format!("unsupported SPDG checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        if n > 64 {
            return Err(invalid(format!("implausible front-end length {n}")));
        }
        let frontend_dims = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let config = GruModelConfig {
            frontend_dims,
            eps: r.f64()?,
            ode_hidden: r.u32()? as usize,
            ode_steps: r.u32()? as usize,
            classes: r.u32()? as usize,
            learning_rate: r.f64()?,
            epochs: r.u32()? as usize,
            seed: r.u64()?,
        };
        config.validate()?;
        let mut frontend = Vec::new();
        for w in config.frontend_dims.windows(2) {
            frontend.push(Layer::BiMap(StiefelParameter::new(r.matrix(w[0], w[1])?)?));
            frontend.push(Layer::ReEig { eps: config.eps });
        }
        let d = config.hidden_dim();
        let n_tri = tri_len(d);
        let mut cell = GruParams::zeros(d);
        cell.set_flat(&r.vec(GruParams::parameter_count(d))?);
        let field = OdeField {
            w1: r.matrix(config.ode_hidden, n_tri)?,
            b1: DVector::from_vec(r.vec(config.ode_hidden)?),
            w2: r.matrix(n_tri, config.ode_hidden)?,
            b2: DVector::from_vec(r.vec(n_tri)?),
        };
        let head = LinearHead {
            weights: r.matrix(config.classes, n_tri)?,
            bias: DVector::from_vec(r.vec(config.classes)?),
        };
        r.finish()?;
        Ok(Self { config, frontend, cell, field, head })
    }

    /// All Euclidean (non-Stiefel) parameters flattened: cell, ODE field,
    /// head weights (column-major), head bias.
    pub fn euclidean_params(&self) -> Vec<f64> {
        let mut v = self.cell.to_flat();
        v.extend(self.field.to_flat());
        v.extend_from_slice(self.head.weights.as_slice());
        v.extend_from_slice(self.head.bias.as_slice());
        v
    }

    pub fn set_euclidean_params(&mut self, v: &[f64]) {
        let n_cell = GruParams::parameter_count(self.config.hidden_dim());
        self.cell.set_flat(&v[..n_cell]);
        let n_field = OdeField::parameter_count(self.field.width(), self.field.hidden());
        self.field.set_flat(&v[n_cell..n_cell + n_field]);
        let mut off = n_cell + n_field;
        let n = self.head.weights.len();
        self.head.weights.as_mut_slice().copy_from_slice(&v[off..off + n]);
        off += n;
        let n = self.head.bias.len();
        self.head.bias.as_mut_slice().copy_from_slice(&v[off..off + n]);
    }
}

impl GruGrads {
    /// Same layout as [`GruModel::euclidean_params`].
    pub fn euclidean(&self) -> Vec<f64> {
        let mut v = self.cell.to_flat();
        v.extend(self.field.to_flat());
        v.extend_from_slice(self.head_weights.as_slice());
        v.extend_from_slice(self.head_bias.as_slice());
        v
    }
}

/// Full-batch training: SGD on the cell, ODE field and head, Stiefel steps on
/// the front-end BiMaps. Keeps the best-validation weights.
pub fn gru_train(
    config: &GruModelConfig,
    train: &[(Vec<SymMatrix>, usize)],
    validation: &[(Vec<SymMatrix>, usize)],
) -> Result<(GruModel, TrainReport)> {
    if train.is_empty() {
        return Err(invalid("gru_train: empty training set"));
    }
    if validation.iter().any(|(_, l)| *l >= config.classes) {
        return Err(invalid("gru_train: validation label outside class range"));
    }
    let mut model = GruModel::new(config.clone())?;
    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (loss, grads, hits) = model.loss_and_grads(train)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        let train_acc = hits as f64 / train.len() as f64;
        let val_acc = if validation.is_empty() { train_acc } else { model.evaluate(validation)? };
        if val_acc > best_acc {
            best_acc = val_acc;
            best = model.clone();
            best_epoch = epoch;
        }
        epochs.push(EpochMetrics { epoch, loss, train_accuracy: train_acc, validation_accuracy: val_acc });
        model.apply_step(&grads, config.learning_rate)?;
    }
    if config.epochs == 0 {
        best_acc = if validation.is_empty() { 0.0 } else { model.evaluate(validation)? };
    }
    Ok((best, TrainReport { epochs, best_epoch, best_validation_accuracy: best_acc }))
}
