//! Session manifests: which recording, which labels, where the trials are.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spdsemg::graph::TrialSpec;

use crate::error::{io_err, CliError, CliResult};

pub const DATA_ROOT_ENV: &str = "SEMG_DATA_ROOT";

/// One recording session. `vocabulary[class_id]` is the label of that class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Recording file; relative paths are taken from the manifest's
    /// directory.
    pub recording: PathBuf,
    pub session: String,
    pub vocabulary: Vec<String>,
    pub trials: Vec<TrialSpec>,
}

/// Resolves a user-supplied path: as given if it exists, otherwise under
/// `$SEMG_DATA_ROOT` when that is set.
pub fn resolve_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            let candidate = Path::new(&root).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

impl Manifest {
    /// Reads and validates a manifest, rewriting a relative recording path
    /// against the manifest's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let path = resolve_path(path);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        if m.recording.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            m.recording = base.join(&m.recording);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Manifest(msg));
        if self.vocabulary.is_empty() {
            return bad("empty vocabulary".into());
        }
        let mut seen = HashMap::new();
        for (i, l) in self.vocabulary.iter().enumerate() {
            if seen.insert(l.as_str(), i).is_some() {
                return bad(format!("label {l:?} appears twice in the vocabulary"));
            }
        }
        for (k, t) in self.trials.iter().enumerate() {
            match self.vocabulary.get(t.class_id) {
                Some(l) if *l == t.label => {}
                Some(l) => return bad(format!("trial {k}: class {} is {l:?}, not {:?}", t.class_id, t.label)),
                None => return bad(format!("trial {k}: class id {} outside vocabulary", t.class_id)),
            }
            if t.start_sample >= t.end_sample {
                return bad(format!("trial {k}: empty sample range"));
            }
            if k > 0 && self.trials[k - 1].end_sample > t.start_sample {
                return bad(format!("trial {k} overlaps or precedes trial {}", k - 1));
            }
        }
        Ok(())
    }

    pub fn trial_session(&self, t: &TrialSpec) -> String {
        t.session.clone().unwrap_or_else(|| self.session.clone())
    }

    /// Repetition index of each trial: the explicit value, or how many earlier
    /// trials in the same session share its label.
    pub fn repetitions(&self) -> Vec<usize> {
        let mut counts: HashMap<(String, String), usize> = HashMap::new();
        self.trials
            .iter()
            .map(|t| {
                let key = (self.trial_session(t), t.label.clone());
                let n = counts.entry(key).or_insert(0);
                let derived = *n;
                *n += 1;
                t.repetition.unwrap_or(derived)
            })
            .collect()
    }
}
