use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spdsemg::analysis::ColumnSelection;
use spdsemg::graph::{FilterSpec, WindowSpec};
use spdsemg_cli::analyze;
use spdsemg_cli::bundle::{write_bundle, BundleSpec};
use spdsemg_cli::error::{CliError, CliResult};
use spdsemg_cli::format::{load_recording, write_recording};
use spdsemg_cli::ingest::{manifest_from_trials, read_signal_csv};
use spdsemg_cli::pipeline::{evaluate_checkpoint, export_distances, FeatureSpec};
use spdsemg_cli::{build_dataset, run_experiment, Checkpoint, ExperimentConfig, Manifest, MetricsReport};

/// Decode multichannel sEMG articulations on the SPD manifold.
#[derive(Parser)]
#[command(name = "spdsemg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a signal CSV (and optional trial CSV) into a recording and manifest.
    Ingest(IngestArgs),
    /// Check manifests against their recordings.
    Validate {
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Run an experiment and write its metrics JSON.
    Run(RunArgs),
    /// Run a network experiment and save the trained checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "checkpoint-out")]
        checkpoint_out: PathBuf,
    },
    /// Score a saved checkpoint on the test side of a config's split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the pairwise geodesic distance matrix and a row-label sidecar.
    ExportDistances {
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagnostics of trained weights and confusion matrices.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Write a synthetic multi-session bundle.
    Synth(SynthArgs),
    /// Print a named protocol preset as a config file.
    Preset {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    signal: PathBuf,
    /// Sample rate in Hz.
    #[arg(long)]
    rate: f64,
    #[arg(long)]
    out: PathBuf,
    /// Trial CSV with `label,start_sample,end_sample[,repetition]`.
    #[arg(long, requires = "manifest_out")]
    trials: Option<PathBuf>,
    #[arg(long)]
    manifest_out: Option<PathBuf>,
    #[arg(long, default_value = "s1")]
    session: String,
    /// Named vocabulary or comma-separated labels.
    #[arg(long)]
    vocabulary: Option<String>,
}

#[derive(Args, Clone)]
#[group(required = true, multiple = false)]
struct ConfigSource {
    #[arg(long)]
    config: Option<PathBuf>,
    /// One of the named protocol presets.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> CliResult<ExperimentConfig> {
        match (&self.config, &self.preset) {
            (Some(p), _) => ExperimentConfig::load(p),
            (None, Some(name)) => ExperimentConfig::preset(name),
            (None, None) => Err(CliError::Config("no config given".into())),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics JSON path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct FeatureArgs {
    /// Sliding-window length in seconds; whole trials when absent.
    #[arg(long, requires = "step")]
    context: Option<f64>,
    #[arg(long, requires = "context")]
    step: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    /// Remove each channel's window mean before the Gram product.
    #[arg(long)]
    center: bool,
}

impl FeatureArgs {
    fn spec(&self) -> CliResult<FeatureSpec> {
        if !(0.0..1.0).contains(&self.eta) {
            return Err(CliError::Config(format!("eta must lie in [0, 1), got {}", self.eta)));
        }
        let window = match (self.context, self.step) {
            (Some(c), Some(s)) => WindowSpec::sliding(c, s),
            _ => WindowSpec::whole_trial(),
        };
        window.validate()?;
        Ok(FeatureSpec { window, eta: self.eta, center: self.center, filter: FilterSpec::default() })
    }
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Off-diagonal to diagonal ratio of QᵀEQ for every window.
    DiagRatio {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Angles between the first BiMap bases of several checkpoints.
    BasisAngle {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-window electrode importance and rank counts (`<out>.counts.csv`).
    Importance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        features: FeatureArgs,
        /// Pick the dominant column per window instead of from the mean edge.
        #[arg(long)]
        per_trial: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy with within-group phoneme confusions counted as correct.
    Collapse {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 250.0)]
    rate: f64,
    /// Named vocabulary or comma-separated labels.
    #[arg(long, default_value = "a,b,c")]
    labels: String,
    #[arg(long, default_value_t = 2)]
    sessions: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 1.0)]
    trial_seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_labels(s: &str) -> Vec<String> {
    match spdsemg::vocab::by_name(s) {
        Some(v) => v.into_iter().map(String::from).collect(),
        None => s.split(',').map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect(),
    }
}

fn load_manifests(paths: &[PathBuf]) -> CliResult<Vec<Manifest>> {
    paths.iter().map(|p| Manifest::load(p)).collect()
}

fn emit(text: &str, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|source| CliError::Io { path: p.display().to_string(), source }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_command(args: &RunArgs) -> CliResult<(ExperimentConfig, spdsemg_cli::pipeline::RunOutput)> {
    let mut config = args.source.load()?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let data = build_dataset(&load_manifests(&args.manifests)?, &config.features())?;
    let output = run_experiment(&config, &data)?;
    emit(&output.report.to_json()?, args.out.as_deref())?;
    Ok((config, output))
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Ingest(a) => {
            let rec = read_signal_csv(&a.signal, a.rate)?;
            write_recording(&rec, &a.out)?;
            if let (Some(trials), Some(mout)) = (&a.trials, &a.manifest_out) {
                let rec_path = match (a.out.canonicalize(), mout.parent()) {
                    (Ok(abs), Some(dir)) => match dir.canonicalize() {
                        Ok(d) => abs.strip_prefix(&d).map(Path::to_path_buf).unwrap_or(abs),
                        Err(_) => abs,
                    },
                    (Ok(abs), None) => abs,
                    (Err(_), _) => a.out.clone(),
                };
                let vocab = a.vocabulary.as_deref().map(parse_labels);
                let m = manifest_from_trials(trials, rec_path, &a.session, vocab)?;
                for t in &m.trials {
                    if t.end_sample > rec.n_samples() {
                        return Err(CliError::Manifest(format!("trial {:?} ends past the recording", t.label)));
                    }
                }
                m.save(mout)?;
            }
            Ok(())
        }
        Command::Validate { manifests } => {
            for p in &manifests {
                let m = Manifest::load(p)?;
                let rec = load_recording(&m.recording)?;
                if let Some(t) = m.trials.iter().find(|t| t.end_sample > rec.n_samples()) {
                    return Err(CliError::Manifest(format!(
                        "{}: trial {:?} ends at {} past {} samples",
                        p.display(),
                        t.label,
                        t.end_sample,
                        rec.n_samples()
                    )));
                }
                let summary = serde_json::json!({
                    "manifest": p.display().to_string(),
                    "session": m.session,
                    "channels": rec.channels(),
                    "samples": rec.n_samples(),
                    "sample_rate": rec.sample_rate,
                    "classes": m.vocabulary.len(),
                    "trials": m.trials.len(),
                });
                println!("{summary}");
            }
            Ok(())
        }
        Command::Run(a) => {
            run_command(&a)?;
            Ok(())
        }
        Command::Train { run, checkpoint_out } => {
            let (config, output) = run_command(&run)?;
            match output.checkpoint {
                Some(ck) => ck.save(&checkpoint_out),
                None => Err(CliError::Config(format!("{} has no trainable checkpoint", config.model.name()))),
            }
        }
        Command::Eval { checkpoint, source, manifests, out } => {
            let config = source.load()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let data = build_dataset(&load_manifests(&manifests)?, &config.features())?;
            let report = evaluate_checkpoint(&ck, &config, &data)?;
            emit(&report.to_json()?, out.as_deref())
        }
        Command::ExportDistances { manifests, features, out } => {
            let data = build_dataset(&load_manifests(&manifests)?, &features.spec()?)?;
            export_distances(&data, &out)?;
            Ok(())
        }
        Command::Analyze(cmd) => analyze_command(cmd),
        Command::Synth(a) => {
            let spec = BundleSpec {
                channels: a.channels,
                sample_rate: a.rate,
                labels: parse_labels(&a.labels),
                sessions: a.sessions,
                repetitions: a.repetitions,
                trial_seconds: a.trial_seconds,
                seed: a.seed,
            };
            for p in write_bundle(&spec, &a.out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Preset { name, out } => {
            let c = ExperimentConfig::preset(&name)?;
            emit(&(serde_json::to_string_pretty(&c)? + "\n"), out.as_deref())
        }
    }
}

fn analyze_command(cmd: AnalyzeCommand) -> CliResult<()> {
    match cmd {
        AnalyzeCommand::DiagRatio { checkpoint, manifests, features, out } => {
            let q = analyze::basis_of(&Checkpoint::load(&checkpoint)?)?;
            let data = build_dataset(&load_manifests(&manifests)?, &features.spec()?)?;
            analyze::write_csv(&analyze::diag_ratios(&q, &data)?, &out)
        }
        AnalyzeCommand::BasisAngle { checkpoints, out } => {
            if checkpoints.len() < 2 {
                return Err(CliError::Config("basis-angle needs at least two checkpoints".into()));
            }
            let named = checkpoints
                .iter()
                .map(|p| Ok((p.display().to_string(), analyze::basis_of(&Checkpoint::load(p)?)?)))
                .collect::<CliResult<Vec<_>>>()?;
            analyze::write_csv(&analyze::basis_angles(&named)?, &out)
        }
        AnalyzeCommand::Importance { checkpoint, manifests, features, per_trial, out } => {
            let q = analyze::basis_of(&Checkpoint::load(&checkpoint)?)?;
            let data = build_dataset(&load_manifests(&manifests)?, &features.spec()?)?;
            let selection = if per_trial { ColumnSelection::PerTrial } else { ColumnSelection::MeanEdge };
            let (_, rows, counts) = analyze::importance(&q, &data, selection)?;
            analyze::write_csv(&rows, &out)?;
            analyze::write_csv(&counts, &out.with_extension("counts.csv"))
        }
        AnalyzeCommand::Collapse { metrics, out } => {
            let report = analyze::collapse(&MetricsReport::load(&metrics)?)?;
            emit(&(serde_json::to_string_pretty(&report)? + "\n"), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
