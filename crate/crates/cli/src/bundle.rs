//! Synthetic multi-session bundles for smoke tests and demos.

use std::path::{Path, PathBuf};

use spdsemg::rng::seeded;
use spdsemg::synth::{class_mixing, synthetic_session, SessionSpec};

use crate::error::{io_err, CliResult};
use crate::format::write_recording;
use crate::manifest::Manifest;

#[derive(Clone, Debug)]
pub struct BundleSpec {
    pub channels: usize,
    pub sample_rate: f64,
    pub labels: Vec<String>,
    pub sessions: usize,
    pub repetitions: usize,
    pub trial_seconds: f64,
    pub seed: u64,
}

/// Writes `s<k>.semg` and `s<k>.json` for each session into `dir` and returns
/// the manifest paths. All sessions share the class mixing matrices.
pub fn write_bundle(spec: &BundleSpec, dir: &Path) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rng = seeded(spec.seed);
    let mixing = class_mixing(&mut rng, spec.channels, spec.labels.len());
    let mut out = Vec::new();
    for k in 1..=spec.sessions {
        let session = format!("s{k}");
        let s = synthetic_session(
            &mut rng,
            &mixing,
            &SessionSpec {
                sample_rate: spec.sample_rate,
                labels: spec.labels.clone(),
                repetitions: spec.repetitions,
                trial_seconds: spec.trial_seconds,
                session: session.clone(),
            },
        )?;
        let rec_name = format!("{session}.semg");
        write_recording(&s.recording, &dir.join(&rec_name))?;
        let trials = s.trials.into_iter().map(|t| spdsemg::graph::TrialSpec { session: None, ..t }).collect();
        let m = Manifest { recording: rec_name.into(), session: session.clone(), vocabulary: spec.labels.clone(), trials };
        let path = dir.join(format!("{session}.json"));
        m.save(&path)?;
        out.push(path);
    }
    Ok(out)
}
