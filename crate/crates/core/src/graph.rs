//! Functional-connectivity graph over the electrode set: windowing of raw
//! recordings, Gram-matrix edge weights and trace regularization.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::SymMatrix;

/// Raw multichannel signal, one row per electrode.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub sample_rate: f64,
    samples: DMatrix<f64>,
}

impl Recording {
    pub fn new(sample_rate: f64, samples: DMatrix<f64>) -> Result<Self> {
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(invalid(format!("sample rate must be positive, got {sample_rate}")));
        }
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(invalid("recording needs at least one channel and one sample"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(invalid("recording contains non-finite samples"));
        }
        Ok(Self { sample_rate, samples })
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }
}

/// One labelled articulation inside a recording, `[start_sample, end_sample)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub label: String,
    pub class_id: usize,
    pub start_sample: usize,
    pub end_sample: usize,
    /// Overrides the manifest-level session when trials of several sessions
    /// share one recording.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    /// Zero-based repetition index of this label within its session. Derived
    /// from trial order when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition: Option<usize>,
}

impl TrialSpec {
    pub fn len(&self) -> usize {
        self.end_sample.saturating_sub(self.start_sample)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowMode {
    WholeTrial,
    Sliding,
}

/// Window geometry in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub mode: WindowMode,
    #[serde(default)]
    pub context: f64,
    #[serde(default)]
    pub step: f64,
}

impl WindowSpec {
    pub fn whole_trial() -> Self {
        Self { mode: WindowMode::WholeTrial, context: 0.0, step: 0.0 }
    }

    pub fn sliding(context: f64, step: f64) -> Self {
        Self { mode: WindowMode::Sliding, context, step }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == WindowMode::Sliding {
            if !(self.context > 0.0) {
                return Err(invalid(format!("window context must be positive, got {}", self.context)));
            }
            if !(self.step > 0.0 && self.step <= self.context) {
                return Err(invalid(format!(
                    "window step must lie in (0, context], got {}",
                    self.step
                )));
            }
        }
        Ok(())
    }
}

/// Seconds to whole samples.
pub fn seconds_to_samples(seconds: f64, sample_rate: f64) -> usize {
    (seconds * sample_rate).round() as usize
}

/// Cuts a trial into `channels × w` blocks.
pub fn extract_windows(
    rec: &Recording,
    trial: &TrialSpec,
    spec: &WindowSpec,
) -> Result<Vec<DMatrix<f64>>> {
    spec.validate()?;
    if trial.start_sample >= trial.end_sample || trial.end_sample > rec.n_samples() {
        return Err(invalid(format!(
            "trial [{}, {}) outside recording of {} samples",
            trial.start_sample,
            trial.end_sample,
            rec.n_samples()
        )));
    }
    let t = trial.len();
    let c = rec.channels();
    match spec.mode {
        WindowMode::WholeTrial => Ok(vec![rec.samples.columns(trial.start_sample, t).into_owned()]),
        WindowMode::Sliding => {
            let w = seconds_to_samples(spec.context, rec.sample_rate);
            let s = seconds_to_samples(spec.step, rec.sample_rate).max(1);
            if w == 0 || w > t {
                return Err(Error::WindowTooLong { window: w, trial: t });
            }
            let count = (t - w) / s + 1;
            Ok((0..count)
                .map(|k| {
                    rec.samples
                        .view((0, trial.start_sample + k * s), (c, w))
                        .into_owned()
                })
                .collect())
        }
    }
}

/// Gram matrix `eᵢⱼ = fᵢᵀfⱼ` of the window rows, optionally after removing
/// each channel's mean over the window. No `1/w` normalization.
pub fn edge_matrix(block: &DMatrix<f64>, center: bool) -> Result<SymMatrix> {
    if block.ncols() < 2 {
        return Err(invalid(format!(
            "edge matrix needs at least 2 samples per window, got {}",
            block.ncols()
        )));
    }
    let x = if center {
        let mut x = block.clone();
        for mut row in x.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
        x
    } else {
        block.clone()
    };
    SymMatrix::new(&x * x.transpose())
}

/// `(1−η)·E + η·trace(E)·I`.
pub fn regularize(e: &SymMatrix, eta: f64) -> Result<SymMatrix> {
    if !(0.0..1.0).contains(&eta) {
        return Err(invalid(format!("eta must lie in [0, 1), got {eta}")));
    }
    if eta == 0.0 {
        return Ok(e.clone());
    }
    let shift = eta * e.trace();
    let mut m = e.matrix() * (1.0 - eta);
    for i in 0..e.dim() {
        m[(i, i)] += shift;
    }
    SymMatrix::new(m)
}

/// Optional pre-filtering of raw signals. Off by default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    /// Band edges in Hz for a 4th-order Butterworth high-pass followed by a
    /// 4th-order Butterworth low-pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandpass: Option<(f64, f64)>,
    /// Centre frequency of a second-order notch (Q = 30).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notch_hz: Option<f64>,
}

impl FilterSpec {
    /// 10–1000 Hz band-pass plus 60 Hz notch.
    pub fn standard() -> Self {
        Self { bandpass: Some((10.0, 1000.0)), notch_hz: Some(60.0) }
    }

    pub fn is_identity(&self) -> bool {
        self.bandpass.is_none() && self.notch_hz.is_none()
    }
}

#[derive(Clone, Copy, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn normalized(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Self { b: [b[0] / a0, b[1] / a0, b[2] / a0], a: [a1 / a0, a2 / a0] }
    }

    fn lowpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * fc / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Self::normalized([(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    fn highpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * fc / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Self::normalized([(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    fn notch(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * fc / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Self::normalized([1.0, -2.0 * c, 1.0], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    /// Direct form II transposed, zero initial state.
    fn run(&self, x: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let input = *v;
            let out = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[0] * out + z2;
            z2 = self.b[2] * input - self.a[1] * out;
            *v = out;
        }
    }
}

// Pole-pair quality factors of a 4th-order Butterworth section.
const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_5];

/// Applies the configured causal filters channel by channel.
pub fn apply_filters(rec: &Recording, spec: &FilterSpec) -> Result<Recording> {
    if spec.is_identity() {
        return Ok(rec.clone());
    }
    let fs = rec.sample_rate;
    let nyquist = fs / 2.0;
    let mut stages = Vec::new();
    if let Some((lo, hi)) = spec.bandpass {
        if !(lo > 0.0 && lo < hi && hi < nyquist) {
            return Err(invalid(format!(
                "band-pass edges ({lo}, {hi}) must satisfy 0 < lo < hi < {nyquist}"
            )));
        }
        stages.extend(BUTTER4_Q.iter().map(|&q| Biquad::highpass(lo, fs, q)));
        stages.extend(BUTTER4_Q.iter().map(|&q| Biquad::lowpass(hi, fs, q)));
    }
    if let Some(f0) = spec.notch_hz {
        if !(f0 > 0.0 && f0 < nyquist) {
            return Err(invalid(format!("notch frequency {f0} outside (0, {nyquist})")));
        }
        stages.push(Biquad::notch(f0, fs, 30.0));
    }
    let mut out = rec.samples.clone();
    let n = out.ncols();
    for ch in 0..out.nrows() {
        let mut row: Vec<f64> = (0..n).map(|t| out[(ch, t)]).collect();
        for st in &stages {
            st.run(&mut row);
        }
        for (t, v) in row.into_iter().enumerate() {
            out[(ch, t)] = v;
        }
    }
    Recording::new(fs, out)
}
