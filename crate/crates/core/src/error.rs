use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("model load error: {0}")]
    Load(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("csv error at line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("oracle protocol error: {0}")]
    Protocol(String),

    #[error("upstream unavailable after {attempts} attempt(s): {message}")]
    UpstreamUnavailable { attempts: u32, message: String },

    #[error("missing contrast cells: {}", .0.join(", "))]
    MissingCells(Vec<String>),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag, used in CLI error documents and HTTP error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Shape { .. } => "shape",
            Error::Numeric(_) => "numeric",
            Error::Divergence { .. } => "divergence",
            Error::Load(_) => "load",
            Error::Schema(_) => "schema",
            Error::Csv { .. } => "csv",
            Error::Generation(_) => "generation",
            Error::Split(_) => "split",
            Error::Protocol(_) => "protocol",
            Error::UpstreamUnavailable { .. } => "upstream_unavailable",
            Error::MissingCells(_) => "missing_cells",
            Error::Evaluation(_) => "evaluation",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(expected: usize, actual: usize) -> Self {
        Error::Shape { expected, actual }
    }
}
