//! Manifests → windowed edge matrices → decoder → metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spdsemg::analysis::topk_table;
use spdsemg::decoders::{
    adjusted_rand_index, clustering_accuracy, k_medoids, mdm_fit, pairwise_distances, DistanceMatrix,
};
use spdsemg::geometry::to_cholesky;
use spdsemg::graph::{apply_filters, edge_matrix, extract_windows, regularize, FilterSpec, WindowSpec};
use spdsemg::gru::{gru_train, GruModel, GruModelConfig};
use spdsemg::nn::{EpochMetrics, TrainReport};
use spdsemg::spdnet::{spdnet_train, SpdNetConfig, SpdNetModel, StiefelParameter};
use spdsemg::{CholeskyPoint, SymMatrix};

use crate::config::{ExperimentConfig, ModelConfig, SplitRule};
use crate::error::{io_err, CliError, CliResult};
use crate::format::load_recording;
use crate::manifest::Manifest;

/// How raw trials become SPD matrices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureSpec {
    pub window: WindowSpec,
    pub eta: f64,
    pub center: bool,
    pub filter: FilterSpec,
}

impl ExperimentConfig {
    pub fn features(&self) -> FeatureSpec {
        FeatureSpec { window: self.window, eta: self.eta, center: self.center, filter: self.filter }
    }
}

#[derive(Clone, Debug)]
pub struct TrialFeatures {
    pub label: String,
    pub class_id: usize,
    pub session: String,
    pub repetition: usize,
    /// Regularized edge matrix of every window, in time order.
    pub windows: Vec<SymMatrix>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocabulary: Vec<String>,
    pub channels: usize,
    pub trials: Vec<TrialFeatures>,
}

impl Dataset {
    /// `(trial, window)` index of every window of the given trials.
    fn windows_of(&self, trials: &[usize]) -> Vec<(usize, usize)> {
        trials.iter().flat_map(|&t| (0..self.trials[t].windows.len()).map(move |w| (t, w))).collect()
    }

    fn window_samples(&self, trials: &[usize]) -> Vec<(SymMatrix, usize)> {
        self.windows_of(trials)
            .into_iter()
            .map(|(t, w)| (self.trials[t].windows[w].clone(), self.trials[t].class_id))
            .collect()
    }

    fn sequences(&self, trials: &[usize]) -> Vec<(Vec<SymMatrix>, usize)> {
        trials.iter().map(|&t| (self.trials[t].windows.clone(), self.trials[t].class_id)).collect()
    }
}

pub fn build_dataset(manifests: &[Manifest], spec: &FeatureSpec) -> CliResult<Dataset> {
    let first = manifests.first().ok_or_else(|| CliError::Manifest("no manifests given".into()))?;
    let vocabulary = first.vocabulary.clone();
    let mut channels = None;
    let mut trials = Vec::new();
    for m in manifests {
        if m.vocabulary != vocabulary {
            return Err(CliError::Manifest(format!("session {:?} has a different vocabulary", m.session)));
        }
        let rec = apply_filters(&load_recording(&m.recording)?, &spec.filter)?;
        match channels {
            None => channels = Some(rec.channels()),
            Some(c) if c != rec.channels() => {
                return Err(CliError::Manifest(format!(
                    "session {:?} has {} channels, expected {c}",
                    m.session,
                    rec.channels()
                )))
            }
            _ => {}
        }
        for (t, repetition) in m.trials.iter().zip(m.repetitions()) {
            let windows = extract_windows(&rec, t, &spec.window)?
                .iter()
                .map(|b| regularize(&edge_matrix(b, spec.center)?, spec.eta))
                .collect::<spdsemg::Result<Vec<_>>>()?;
            trials.push(TrialFeatures {
                label: t.label.clone(),
                class_id: t.class_id,
                session: m.trial_session(t),
                repetition,
                windows,
            });
        }
    }
    Ok(Dataset { vocabulary, channels: channels.unwrap_or(0), trials })
}

/// Trial indices of the training and test sides.
pub fn split_trials(data: &Dataset, rule: &SplitRule) -> CliResult<(Vec<usize>, Vec<usize>)> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, t) in data.trials.iter().enumerate() {
        match rule {
            SplitRule::BySession { train_sessions, test_sessions } => {
                if train_sessions.contains(&t.session) {
                    train.push(i);
                } else if test_sessions.is_empty() || test_sessions.contains(&t.session) {
                    test.push(i);
                }
            }
            SplitRule::ByRepetitionIndex { train_repetitions } => {
                if t.repetition < *train_repetitions {
                    train.push(i);
                } else {
                    test.push(i);
                }
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Config(format!(
            "split leaves {} training and {} test trials",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub support: u64,
    pub correct: u64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub parameter_count: usize,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub epochs: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSummary {
    pub k: usize,
    pub accuracy: f64,
    pub adjusted_rand_index: f64,
    pub total_cost: f64,
    pub iterations: usize,
}

/// Written as JSON by `run` and `eval`. Rows of `confusion` are true
/// classes, columns predictions, both indexed like `labels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub seed: u64,
    pub labels: Vec<String>,
    pub train_items: usize,
    pub test_items: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub topk: Vec<TopK>,
    pub confusion: Vec<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clustering: Option<ClusteringSummary>,
}

impl MetricsReport {
    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A trained network.
#[derive(Clone, Debug)]
pub enum Checkpoint {
    SpdNet(SpdNetModel),
    Gru(GruModel),
}

impl Checkpoint {
    pub fn name(&self) -> &'static str {
        match self {
            Checkpoint::SpdNet(_) => "spdnet",
            Checkpoint::Gru(_) => "gru",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Checkpoint::SpdNet(m) => m.to_bytes(),
            Checkpoint::Gru(m) => m.to_bytes(),
        }
    }

    /// Picks the model type from the leading magic bytes.
    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        match bytes.get(..4) {
            Some(m) if m == SpdNetModel::MAGIC => Ok(Checkpoint::SpdNet(SpdNetModel::from_bytes(bytes)?)),
            Some(m) if m == GruModel::MAGIC => Ok(Checkpoint::Gru(GruModel::from_bytes(bytes)?)),
            _ => Err(CliError::Format("not an SPDN or SPDG checkpoint".into())),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn first_bimap(&self) -> CliResult<&StiefelParameter> {
        let b = match self {
            Checkpoint::SpdNet(m) => Some(m.first_bimap()),
            Checkpoint::Gru(m) => m.bimaps().next(),
        };
        b.ok_or_else(|| CliError::Format("checkpoint has no BiMap layer".into()))
    }

    fn input_dim(&self) -> usize {
        match self {
            Checkpoint::SpdNet(m) => m.config.input_dim(),
            Checkpoint::Gru(m) => m.config.frontend_dims[0],
        }
    }

    fn classes(&self) -> usize {
        match self {
            Checkpoint::SpdNet(m) => m.config.classes,
            Checkpoint::Gru(m) => m.config.classes,
        }
    }

    fn parameter_count(&self) -> usize {
        match self {
            Checkpoint::SpdNet(m) => m.parameter_count(),
            Checkpoint::Gru(m) => m.parameter_count(),
        }
    }

    /// Logit rows and true labels for the test trials: one row per window
    /// for the SPD network, one per trial for the GRU.
    fn score(&self, data: &Dataset, test: &[usize]) -> CliResult<(Vec<Vec<f64>>, Vec<usize>)> {
        if self.input_dim() != data.channels || self.classes() != data.vocabulary.len() {
            return Err(CliError::Config(format!(
                "checkpoint expects {} channels and {} classes, data has {} and {}",
                self.input_dim(),
                self.classes(),
                data.channels,
                data.vocabulary.len()
            )));
        }
        let (mut rows, mut labels) = (Vec::new(), Vec::new());
        match self {
            Checkpoint::SpdNet(m) => {
                for (x, y) in data.window_samples(test) {
                    rows.push(m.forward(&x)?.as_slice().to_vec());
                    labels.push(y);
                }
            }
            Checkpoint::Gru(m) => {
                for (seq, y) in data.sequences(test) {
                    rows.push(m.forward(&seq)?.as_slice().to_vec());
                    labels.push(y);
                }
            }
        }
        Ok((rows, labels))
    }
}

pub struct RunOutput {
    pub report: MetricsReport,
    pub checkpoint: Option<Checkpoint>,
}

fn bimap_dims(channels: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![channels];
    if hidden.is_empty() {
        dims.push(channels);
    } else {
        dims.extend_from_slice(hidden);
    }
    dims
}

fn training_summary(parameter_count: usize, r: TrainReport) -> TrainingSummary {
    TrainingSummary {
        parameter_count,
        best_epoch: r.best_epoch,
        best_validation_accuracy: r.best_validation_accuracy,
        epochs: r.epochs,
    }
}

fn classification_report(
    model: &str,
    seed: u64,
    labels: &[String],
    train_items: usize,
    rows: &[Vec<f64>],
    truth: &[usize],
    top_k: usize,
) -> CliResult<MetricsReport> {
    let n = labels.len();
    let mut confusion = vec![vec![0u64; n]; n];
    for (row, &y) in rows.iter().zip(truth) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        confusion[y][best] += 1;
    }
    let per_class = labels
        .iter()
        .enumerate()
        .map(|(c, l)| {
            let support: u64 = confusion[c].iter().sum();
            let correct = confusion[c][c];
            ClassMetrics {
                label: l.clone(),
                support,
                correct,
                accuracy: (support > 0).then(|| correct as f64 / support as f64),
            }
        })
        .collect();
    let correct: u64 = (0..n).map(|c| confusion[c][c]).sum();
    let topk = topk_table(rows, truth, top_k.min(n))?
        .into_iter()
        .enumerate()
        .map(|(i, accuracy)| TopK { k: i + 1, accuracy })
        .collect();
    Ok(MetricsReport {
        model: model.into(),
        seed,
        labels: labels.to_vec(),
        train_items,
        test_items: rows.len(),
        accuracy: correct as f64 / rows.len() as f64,
        per_class,
        topk,
        confusion,
        training: None,
        clustering: None,
    })
}

fn points(samples: &[(SymMatrix, usize)]) -> CliResult<Vec<(CholeskyPoint, usize)>> {
    samples.iter().map(|(e, y)| Ok((to_cholesky(e)?, *y))).collect()
}

/// Runs the configured experiment. Windows are independent samples for the
/// MDM, k-medoids and SPD network; the GRU reads each trial as a sequence.
/// k-medoids clusters every window of both split sides.
pub fn run_experiment(config: &ExperimentConfig, data: &Dataset) -> CliResult<RunOutput> {
    config.validate()?;
    let (train, test) = split_trials(data, &config.split)?;
    let labels = &data.vocabulary;
    let classes = labels.len();
    let seed = config.seed;
    let name = config.model.name();
    match &config.model {
        ModelConfig::Mdm => {
            let train_pts = points(&data.window_samples(&train))?;
            let test_pts = points(&data.window_samples(&test))?;
            let model = mdm_fit(&train_pts)?;
            let mut rows = Vec::with_capacity(test_pts.len());
            for (p, _) in &test_pts {
                let d = model.distances(p)?;
                let mut row = vec![f64::NEG_INFINITY; classes];
                for (k, &c) in model.class_ids().iter().enumerate() {
                    row[c] = -d[k];
                }
                rows.push(row);
            }
            let truth: Vec<usize> = test_pts.iter().map(|(_, y)| *y).collect();
            let report = classification_report(name, seed, labels, train_pts.len(), &rows, &truth, config.top_k)?;
            Ok(RunOutput { report, checkpoint: None })
        }
        ModelConfig::Kmedoids => {
            let all: Vec<usize> = (0..data.trials.len()).collect();
            let pts = points(&data.window_samples(&all))?;
            let truth: Vec<usize> = pts.iter().map(|(_, y)| *y).collect();
            let mut present = truth.clone();
            present.sort_unstable();
            present.dedup();
            let d = pairwise_distances(&pts.into_iter().map(|(p, _)| p).collect::<Vec<_>>())?;
            let km = k_medoids(&d, present.len(), seed)?;
            let clustering = ClusteringSummary {
                k: present.len(),
                accuracy: clustering_accuracy(&km.assignments, &truth)?,
                adjusted_rand_index: adjusted_rand_index(&km.assignments, &truth)?,
                total_cost: km.total_cost(),
                iterations: km.iterations,
            };
            let report = MetricsReport {
                model: name.into(),
                seed,
                labels: labels.clone(),
                train_items: 0,
                test_items: truth.len(),
                accuracy: clustering.accuracy,
                per_class: Vec::new(),
                topk: Vec::new(),
                confusion: Vec::new(),
                training: None,
                clustering: Some(clustering),
            };
            Ok(RunOutput { report, checkpoint: None })
        }
        ModelConfig::Spdnet(s) => {
            let cfg = SpdNetConfig {
                dims: bimap_dims(data.channels, &s.hidden_dims),
                eps: s.eps,
                classes,
                learning_rate: s.learning_rate,
                epochs: s.epochs,
                seed,
            };
            let train_set = data.window_samples(&train);
            let test_set = data.window_samples(&test);
            let (model, tr) = spdnet_train(&cfg, &train_set, &test_set)?;
            let ck = Checkpoint::SpdNet(model);
            let (rows, truth) = ck.score(data, &test)?;
            let mut report = classification_report(name, seed, labels, train_set.len(), &rows, &truth, config.top_k)?;
            report.training = Some(training_summary(ck.parameter_count(), tr));
            Ok(RunOutput { report, checkpoint: Some(ck) })
        }
        ModelConfig::Gru(g) => {
            let cfg = GruModelConfig {
                frontend_dims: bimap_dims(data.channels, &g.hidden_dims),
                eps: g.eps,
                ode_hidden: g.ode_hidden,
                ode_steps: g.ode_steps,
                classes,
                learning_rate: g.learning_rate,
                epochs: g.epochs,
                seed,
            };
            let train_set = data.sequences(&train);
            let test_set = data.sequences(&test);
            let (model, tr) = gru_train(&cfg, &train_set, &test_set)?;
            let ck = Checkpoint::Gru(model);
            let (rows, truth) = ck.score(data, &test)?;
            let mut report = classification_report(name, seed, labels, train_set.len(), &rows, &truth, config.top_k)?;
            report.training = Some(training_summary(ck.parameter_count(), tr));
            Ok(RunOutput { report, checkpoint: Some(ck) })
        }
    }
}

/// Scores a trained checkpoint on the test side of the configured split.
pub fn evaluate_checkpoint(ck: &Checkpoint, config: &ExperimentConfig, data: &Dataset) -> CliResult<MetricsReport> {
    let (train, test) = split_trials(data, &config.split)?;
    let train_items = match ck {
        Checkpoint::SpdNet(_) => data.windows_of(&train).len(),
        Checkpoint::Gru(_) => train.len(),
    };
    let (rows, truth) = ck.score(data, &test)?;
    let mut report =
        classification_report(ck.name(), config.seed, &data.vocabulary, train_items, &rows, &truth, config.top_k)?;
    report.training = None;
    Ok(report)
}

/// One row of the distance export's label sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub index: usize,
    pub label: String,
    pub class_id: usize,
    pub session: String,
    pub repetition: usize,
    pub trial: usize,
    pub window: usize,
}

/// Geodesic distances between every window of every trial.
pub fn distance_matrix(data: &Dataset) -> CliResult<(DistanceMatrix, Vec<DistanceRow>)> {
    let all: Vec<usize> = (0..data.trials.len()).collect();
    let mut pts = Vec::new();
    let mut rows = Vec::new();
    for (index, (t, w)) in data.windows_of(&all).into_iter().enumerate() {
        let tr = &data.trials[t];
        pts.push(to_cholesky(&tr.windows[w])?);
        rows.push(DistanceRow {
            index,
            label: tr.label.clone(),
            class_id: tr.class_id,
            session: tr.session.clone(),
            repetition: tr.repetition,
            trial: t,
            window: w,
        });
    }
    Ok((pairwise_distances(&pts)?, rows))
}

/// `<out>` with its extension replaced by `labels.csv`.
pub fn sidecar_path(out: &Path) -> std::path::PathBuf {
    out.with_extension("labels.csv")
}

/// Writes the matrix (no header, shortest round-trip decimal form) to `out`
/// and the row labels to the sidecar.
pub fn export_distances(data: &Dataset, out: &Path) -> CliResult<DistanceMatrix> {
    let (d, rows) = distance_matrix(data)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(out)?;
    for i in 0..d.len() {
        w.write_record(d.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(io_err(out))?;
    let side = sidecar_path(out);
    let mut w = csv::Writer::from_path(&side)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(&side))?;
    Ok(d)
}

/// Reads a matrix written by [`export_distances`].
pub fn read_distance_csv(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| CliError::Format(format!("{path:?}: {e}"))))
            .collect::<CliResult<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}
