use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FlozError>;

#[derive(Debug, Error)]
pub enum FlozError {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error(
        "degenerate geometry: covariance eigenvalue ratio {ratio:.3e} is below {threshold:.0e}; \
         drop the constant (or linearly dependent) parameter direction"
    )]
    DegenerateGeometry { ratio: f64, threshold: f64 },

    #[error("numerical overflow: non-finite value produced by `{op}`")]
    NumericalOverflow { op: String },

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(
        "insufficient ball coverage: {n_in_ball} of {n_total} samples ({fraction:.4}) lie inside \
         the latent ball, at least {required} are needed"
    )]
    InsufficientCoverage {
        n_in_ball: usize,
        n_total: usize,
        fraction: f64,
        required: usize,
    },

    #[error("sampling geometry: {0}")]
    Geometry(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FlozError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlozError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            FlozError::Parse { .. }
            | FlozError::Schema(_)
            | FlozError::Domain(_)
            | FlozError::Precondition(_)
            | FlozError::Configuration(_)
            | FlozError::Io { .. }
            | FlozError::Json(_) => 2,
            FlozError::DegenerateGeometry { .. }
            | FlozError::NumericalOverflow { .. }
            | FlozError::NonFiniteLoss { .. }
            | FlozError::Geometry(_) => 3,
            FlozError::InsufficientCoverage { .. } => 4,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            FlozError::Parse { .. } => "parse",
            FlozError::Schema(_) => "schema",
            FlozError::Domain(_) => "domain",
            FlozError::Precondition(_) => "precondition",
            FlozError::Configuration(_) => "configuration",
            FlozError::DegenerateGeometry { .. } => "degenerate_geometry",
            FlozError::NumericalOverflow { .. } => "numerical_overflow",
            FlozError::NonFiniteLoss { .. } => "non_finite_loss",
            FlozError::InsufficientCoverage { .. } => "insufficient_coverage",
            FlozError::Geometry(_) => "geometry",
            FlozError::Io { .. } => "io",
            FlozError::Json(_) => "json",
        }
    }

    /// `{"error": {kind, message, exit_code, ...}}` for tools that parse
    /// failures.
    pub fn to_json(&self) -> serde_json::Value {
        let mut err = serde_json::json!({
            "kind": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        let extra = match self {
            FlozError::InsufficientCoverage {
                n_in_ball,
                n_total,
                fraction,
                required,
            } => serde_json::json!({
                "n_in_ball": n_in_ball,
                "n_total": n_total,
                "fraction": fraction,
                "required": required,
            }),
            FlozError::NonFiniteLoss { epoch, batch } => {
                serde_json::json!({ "epoch": epoch, "batch": batch })
            }
            FlozError::Parse { path, line, .. } => {
                serde_json::json!({ "path": path, "line": line })
            }
            _ => serde_json::json!({}),
        };
        if let (Some(e), Some(x)) = (err.as_object_mut(), extra.as_object()) {
            e.extend(x.clone());
        }
        serde_json::json!({ "error": err })
    }
}
