//! Seeded synthetic data: labelled clouds of Cholesky points, drifting SPD
//! sequences and toy multichannel recordings with class-specific mixing.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::geometry::{chart_exp, from_cholesky, tri_len, CholeskyPoint, TriangularTangent};
use crate::graph::{Recording, TrialSpec};
use crate::linalg::SymMatrix;
use crate::rng::{normal, Pcg};

/// `classes` centroids drawn in the log-Cholesky chart with per-coordinate
/// standard deviation `separation`, and `per_class` points around each with
/// chart-space noise `spread`. Labels are `0..classes`, grouped by class.
pub fn chart_clusters(
    rng: &mut Pcg,
    dim: usize,
    classes: usize,
    per_class: usize,
    separation: f64,
    spread: f64,
) -> Result<Vec<(CholeskyPoint, usize)>> {
    if dim == 0 || classes == 0 {
        return Err(invalid("chart_clusters needs a positive dim and class count"));
    }
    let n = tri_len(dim);
    let centroids: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..n).map(|_| separation * normal(rng)).collect()).collect();
    let mut out = Vec::with_capacity(classes * per_class);
    for (c, mu) in centroids.iter().enumerate() {
        for _ in 0..per_class {
            let x: Vec<f64> = mu.iter().map(|m| m + spread * normal(rng)).collect();
            out.push((chart_exp(&TriangularTangent::from_vec(dim, &x)?), c));
        }
    }
    Ok(out)
}

/// Same as [`chart_clusters`], mapped to SPD matrices `L·Lᵀ`.
pub fn spd_clusters(
    rng: &mut Pcg,
    dim: usize,
    classes: usize,
    per_class: usize,
    separation: f64,
    spread: f64,
) -> Result<Vec<(SymMatrix, usize)>> {
    Ok(chart_clusters(rng, dim, classes, per_class, separation, spread)?
        .into_iter()
        .map(|(p, c)| (from_cholesky(&p), c))
        .collect())
}

/// Sequences of SPD matrices whose log-diagonal drifts over time along a
/// class-specific direction: class `c` raises channel `c mod dim` and lowers
/// channel `(c + 1) mod dim` by `rate` per step. Start points and per-step
/// jitter are random, so a single frame is only weakly informative.
pub fn drift_sequences(
    rng: &mut Pcg,
    dim: usize,
    classes: usize,
    per_class: usize,
    len: usize,
    rate: f64,
) -> Result<Vec<(Vec<SymMatrix>, usize)>> {
    if dim < 2 || classes == 0 || len == 0 {
        return Err(invalid("drift_sequences needs dim ≥ 2, a class and a non-empty length"));
    }
    let n = tri_len(dim);
    let diag_slot = |i: usize| i * (i + 1) / 2 + i;
    let mut out = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            let mut x: Vec<f64> = (0..n).map(|_| 0.3 * normal(rng)).collect();
            let mut seq = Vec::with_capacity(len);
            for _ in 0..len {
                let jitter: Vec<f64> = x.iter().map(|v| v + 0.05 * normal(rng)).collect();
                seq.push(from_cholesky(&chart_exp(&TriangularTangent::from_vec(dim, &jitter)?)));
                x[diag_slot(c % dim)] += rate;
                x[diag_slot((c + 1) % dim)] -= rate;
            }
            out.push((seq, c));
        }
    }
    Ok(out)
}

/// A synthetic recording with labelled trials.
#[derive(Clone, Debug)]
pub struct SyntheticSession {
    pub recording: Recording,
    pub trials: Vec<TrialSpec>,
}

/// Layout of one synthetic session.
#[derive(Clone, Debug)]
pub struct SessionSpec {
    pub sample_rate: f64,
    pub labels: Vec<String>,
    pub repetitions: usize,
    pub trial_seconds: f64,
    pub session: String,
}

/// One random `I + 0.6·N(0, 1)` channel mixing matrix per class.
pub fn class_mixing(rng: &mut Pcg, channels: usize, classes: usize) -> Vec<DMatrix<f64>> {
    (0..classes)
        .map(|_| DMatrix::identity(channels, channels) + DMatrix::from_fn(channels, channels, |_, _| 0.6 * normal(rng)))
        .collect()
}

/// White noise pushed through the class's mixing matrix during each trial,
/// low-level unmixed noise in the gaps. Trials cycle through the labels
/// `repetitions` times.
pub fn synthetic_session(rng: &mut Pcg, mixing: &[DMatrix<f64>], spec: &SessionSpec) -> Result<SyntheticSession> {
    let labels = &spec.labels;
    if mixing.is_empty() || labels.len() != mixing.len() || spec.repetitions == 0 {
        return Err(invalid("synthetic_session needs one mixing matrix per label and a repetition"));
    }
    let channels = mixing[0].nrows();
    let sample_rate = spec.sample_rate;
    let repetitions = spec.repetitions;
    let trial_len = (spec.trial_seconds * sample_rate).round() as usize;
    let gap = (0.25 * sample_rate).round() as usize;
    if trial_len < 2 {
        return Err(invalid("synthetic trials must span at least two samples"));
    }
    let total = repetitions * labels.len() * (trial_len + gap) + gap;
    let mut samples = DMatrix::zeros(channels, total);
    let mut trials = Vec::new();
    let mut t = gap;
    for j in 0..gap {
        for i in 0..channels {
            samples[(i, j)] = 0.1 * normal(rng);
        }
    }
    for rep in 0..repetitions {
        for (c, label) in labels.iter().enumerate() {
            for j in t..t + trial_len {
                let z = nalgebra::DVector::from_fn(channels, |_, _| normal(rng));
                samples.set_column(j, &(&mixing[c] * z));
            }
            trials.push(TrialSpec {
                label: label.clone(),
                class_id: c,
                start_sample: t,
                end_sample: t + trial_len,
                session: Some(spec.session.clone()),
                repetition: Some(rep),
            });
            t += trial_len;
            for j in t..t + gap {
                for i in 0..channels {
                    samples[(i, j)] = 0.1 * normal(rng);
                }
            }
            t += gap;
        }
    }
    Ok(SyntheticSession { recording: Recording::new(sample_rate, samples)?, trials })
}
