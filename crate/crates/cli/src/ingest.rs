//! Conversion of plain-text exports into recordings and manifests.
//!
//! Signal CSV: a header row of channel names, then one row per sample.
//! Trial CSV: header `label,start_sample,end_sample` with an optional
//! `repetition` column.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;
use spdsemg::graph::{Recording, TrialSpec};

use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

pub fn read_signal_csv(path: &Path, sample_rate: f64) -> CliResult<Recording> {
    let mut r = csv::Reader::from_path(path)?;
    let channels = r.headers()?.len();
    let mut values = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != channels {
            return Err(CliError::Format(format!("row {row} has {} fields, expected {channels}", rec.len())));
        }
        for f in rec.iter() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|e| CliError::Format(format!("row {row}: {f:?}: {e}")))?;
            values.push(v);
        }
    }
    let samples = values.len() / channels.max(1);
    let m = DMatrix::from_row_slice(samples, channels, &values).transpose();
    Ok(Recording::new(sample_rate, m)?)
}

#[derive(Debug, Deserialize)]
struct TrialRow {
    label: String,
    start_sample: usize,
    end_sample: usize,
    #[serde(default)]
    repetition: Option<usize>,
}

/// Builds a manifest from a trial CSV. Without an explicit vocabulary, class
/// ids follow the order in which labels first appear.
pub fn manifest_from_trials(
    trials_csv: &Path,
    recording: PathBuf,
    session: &str,
    vocabulary: Option<Vec<String>>,
) -> CliResult<Manifest> {
    let mut r = csv::Reader::from_path(trials_csv)?;
    let rows = r.deserialize().collect::<Result<Vec<TrialRow>, _>>()?;
    let explicit = vocabulary.is_some();
    let mut vocabulary = vocabulary.unwrap_or_default();
    let mut trials = Vec::with_capacity(rows.len());
    for row in rows {
        let class_id = match vocabulary.iter().position(|l| *l == row.label) {
            Some(c) => c,
            None if !explicit => {
                vocabulary.push(row.label.clone());
                vocabulary.len() - 1
            }
            None => return Err(CliError::Manifest(format!("label {:?} not in the vocabulary", row.label))),
        };
        trials.push(TrialSpec {
            label: row.label,
            class_id,
            start_sample: row.start_sample,
            end_sample: row.end_sample,
            session: None,
            repetition: row.repetition,
        });
    }
    let m = Manifest { recording, session: session.into(), vocabulary, trials };
    m.validate()?;
    Ok(m)
}
