use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported recording version {0} (expected 1)")]
    UnsupportedVersion(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Core(#[from] spdsemg::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

impl CliError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Format(_) => "format",
            CliError::UnsupportedVersion(_) => "unsupported-version",
            CliError::Config(_) => "config",
            CliError::Manifest(_) => "manifest",
            CliError::Core(_) => "core",
            CliError::Io { .. } => "io",
            CliError::Json(_) => "json",
            CliError::Csv(_) => "csv",
        }
    }
}
