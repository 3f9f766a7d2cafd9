use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hsfusion::Error),

    #[error("{0}")]
    Usage(String),

    #[error("malformed config {path}: {detail}")]
    Config { path: String, detail: String },

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{failures} of {checked} gradient coordinates outside tolerance (max relative error {max_rel_error:.3e})")]
    GradcheckFailed {
        failures: usize,
        checked: usize,
        max_rel_error: f64,
    },
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "bad_config",
            CliError::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "file_not_found",
            CliError::File { .. } => "io",
            CliError::GradcheckFailed { .. } => "gradcheck_failed",
        }
    }

    /// `error code=<code> message=<json string>` on a single line.
    pub fn one_line(&self) -> String {
        let message = serde_json::to_string(&self.to_string()).expect("strings serialize");
        format!("error code={} message={message}", self.code())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
