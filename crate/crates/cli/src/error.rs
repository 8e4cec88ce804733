use serde_json::json;

/// Failure classes of a CLI invocation; each maps to its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("divergence at step {step} (particle {particle})")]
    Divergence {
        step: u64,
        particle: usize,
        snapshot: Vec<Vec<f64>>,
    },
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence { .. } => 3,
            CliError::Oracle(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Divergence { .. } => "divergence",
            CliError::Oracle(_) => "oracle",
            CliError::Other(_) => "other",
        }
    }

    /// Machine-readable error record written to stderr.
    pub fn record(&self) -> serde_json::Value {
        let mut r = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let CliError::Divergence { step, particle, snapshot } = self {
            r["step"] = json!(step);
            r["particle"] = json!(particle);
            r["last_finite_snapshot"] = json!(snapshot);
        }
        r
    }

    pub(crate) fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub(crate) fn oracle(e: wgf_core::Error) -> Self {
        CliError::Oracle(e.to_string())
    }

    /// Classifies a core error raised while integrating particles.
    pub(crate) fn from_run(e: wgf_core::Error) -> Self {
        match e {
            wgf_core::Error::Divergence { particle, step, snapshot } => CliError::Divergence { step, particle, snapshot },
            wgf_core::Error::Config(m) | wgf_core::Error::Parse { message: m, .. } => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(format!("json: {e}"))
    }
}
