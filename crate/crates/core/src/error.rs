use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the network, cost, data and evaluation layers.
#[derive(Debug)]
pub enum Error {
    /// Two operands disagree along a named axis.
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },
    /// A feature column with zero norm reached a cosine computation.
    ZeroNormColumn { matrix: &'static str, column: usize },
    /// A batch produced no positive or no negative pairs.
    DegenerateBatch { positives: usize, negatives: usize },
    /// All considered similarities are equal, so the Fisher denominator vanishes.
    DegenerateVariance,
    /// A non-finite value showed up where finite arithmetic is required.
    NonFinite { context: String },
    /// Training produced a non-finite cost.
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        cost: f64,
        param_norm: f64,
    },
    /// Gradient check exceeded its threshold.
    GradientCheck {
        target: String,
        rel_error: f64,
        threshold: f64,
    },
    /// Model file or split file could not be parsed.
    Format(String),
    /// A dataset does not satisfy a split/evaluation protocol.
    Protocol(String),
    /// Caller misuse: bad arguments, missing cache, empty gallery.
    Usage(String),
    Io { path: PathBuf, source: std::io::Error },
    Image { path: PathBuf, message: String },
    Csv { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data/protocol, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Dimension { .. }
            | Error::Format(_)
            | Error::Protocol(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Csv { .. } => 2,
            Error::ZeroNormColumn { .. }
            | Error::DegenerateBatch { .. }
            | Error::DegenerateVariance
            | Error::NonFinite { .. }
            | Error::TrainingDiverged { .. }
            | Error::GradientCheck { .. } => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension {
                op,
                axis,
                expected,
                got,
            } => write!(f, "{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}"),
            Error::ZeroNormColumn { matrix, column } => {
                write!(f, "singular input: column {column} of {matrix} has zero norm")
            }
            Error::DegenerateBatch {
                positives,
                negatives,
            } => write!(
                f,
                "degenerate batch: {positives} positive and {negatives} negative pairs"
            ),
            Error::DegenerateVariance => {
                write!(f, "degenerate variance: all considered similarities are equal")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::TrainingDiverged {
                epoch,
                batch,
                cost,
                param_norm,
            } => write!(
                f,
                "training diverged at epoch {epoch}, batch {batch}: cost={cost}, parameter norm={param_norm}"
            ),
            Error::GradientCheck {
                target,
                rel_error,
                threshold,
            } => write!(
                f,
                "gradient check failed for {target}: relative error {rel_error:.3e} >= {threshold:.1e}"
            ),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Protocol(msg) => write!(f, "protocol error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Image { path, message } => write!(f, "{}: {message}", path.display()),
            Error::Csv { path, message } => write!(f, "{}: {message}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
