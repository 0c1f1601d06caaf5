//! Experiment configuration (JSON) and the named protocol presets.
//!
//! ```json
//! {
//!   "window": { "mode": "whole-trial" },
//!   "eta": 0.1,
//!   "center": false,
//!   "filter": { "bandpass": [10.0, 1000.0], "notch_hz": 60.0 },
//!   "model": { "kind": "spdnet", "hidden_dims": [22], "epochs": 1000 },
//!   "split": { "rule": "by-repetition-index", "train_repetitions": 3 },
//!   "seed": 0,
//!   "top_k": 5
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use spdsemg::graph::{FilterSpec, WindowSpec};

use crate::error::{io_err, CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpdNetSettings {
    /// BiMap output sizes after the channel count; empty means one square
    /// BiMap.
    pub hidden_dims: Vec<usize>,
    pub eps: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for SpdNetSettings {
    fn default() -> Self {
        Self { hidden_dims: Vec::new(), eps: 1e-4, learning_rate: 1e-2, epochs: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GruSettings {
    /// Front-end BiMap output sizes after the channel count; the last one is
    /// the hidden SPD size. Empty means one square BiMap.
    pub hidden_dims: Vec<usize>,
    pub eps: f64,
    pub ode_hidden: usize,
    pub ode_steps: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for GruSettings {
    fn default() -> Self {
        Self { hidden_dims: Vec::new(), eps: 1e-4, ode_hidden: 280, ode_steps: 10, learning_rate: 1e-2, epochs: 150 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    Mdm,
    Kmedoids,
    Spdnet(SpdNetSettings),
    Gru(GruSettings),
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Mdm => "mdm",
            ModelConfig::Kmedoids => "kmedoids",
            ModelConfig::Spdnet(_) => "spdnet",
            ModelConfig::Gru(_) => "gru",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SplitRule {
    /// Whole sessions for training; the listed test sessions (all others
    /// when empty) for testing.
    BySession {
        train_sessions: Vec<String>,
        #[serde(default)]
        test_sessions: Vec<String>,
    },
    /// Within every session, repetitions `0..train_repetitions` train and
    /// the rest test.
    ByRepetitionIndex { train_repetitions: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub window: WindowSpec,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub center: bool,
    #[serde(default)]
    pub filter: FilterSpec,
    pub model: ModelConfig,
    pub split: SplitRule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    5
}

pub const PRESETS: [&str; 4] = ["words-1.5s", "gru-150ms/30ms", "sentences-400ms/100ms", "passage-100ms"];

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let c: ExperimentConfig = serde_json::from_str(&text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(io_err(path))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.window.validate()?;
        if !(0.0..1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1), got {}", self.eta));
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        match &self.split {
            SplitRule::BySession { train_sessions, test_sessions } => {
                if train_sessions.is_empty() {
                    return bad("by-session split needs at least one training session".into());
                }
                if let Some(s) = test_sessions.iter().find(|s| train_sessions.contains(s)) {
                    return bad(format!("session {s:?} is both train and test"));
                }
            }
            SplitRule::ByRepetitionIndex { train_repetitions } => {
                if *train_repetitions == 0 {
                    return bad("train_repetitions must be at least 1".into());
                }
            }
        }
        match &self.model {
            ModelConfig::Spdnet(s) => {
                if !(s.eps > 0.0 && s.learning_rate > 0.0) {
                    return bad("spdnet eps and learning_rate must be positive".into());
                }
            }
            ModelConfig::Gru(g)
                if (!(g.eps > 0.0 && g.learning_rate > 0.0) || g.ode_hidden == 0 || g.ode_steps == 0) => {
                    return bad("gru eps, learning_rate, ode_hidden and ode_steps must be positive".into());
                }
            _ => {}
        }
        Ok(())
    }

    /// Named protocol presets.
    pub fn preset(name: &str) -> CliResult<Self> {
        let base = |window, model| ExperimentConfig {
            window,
            eta: 0.1,
            center: false,
            filter: FilterSpec::default(),
            model,
            split: SplitRule::ByRepetitionIndex { train_repetitions: 3 },
            seed: 0,
            top_k: 5,
        };
        Ok(match name {
            "words-1.5s" => base(WindowSpec::whole_trial(), ModelConfig::Mdm),
            "gru-150ms/30ms" => base(WindowSpec::sliding(0.15, 0.03), ModelConfig::Gru(GruSettings::default())),
            "sentences-400ms/100ms" => {
                base(WindowSpec::sliding(0.4, 0.1), ModelConfig::Spdnet(SpdNetSettings::default()))
            }
            "passage-100ms" => base(WindowSpec::sliding(0.1, 0.1), ModelConfig::Mdm),
            _ => {
                return Err(CliError::Config(format!(
                    "unknown preset {name:?}; available: {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }
}
