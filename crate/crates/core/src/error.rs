use std::fmt;

/// Errors produced by the library.
///
/// The variants map onto the CLI exit-code classes: parameter and
/// dimension errors are usage problems, data/format/io errors are bad
/// inputs, and the numeric variants signal solver or training failure.
#[derive(Debug, Clone, PartialEq)]
pub enum CsError {
    /// Tensor shapes do not satisfy an operation's contract.
    Dimension(String),
    /// A scalar argument is out of its allowed range.
    Parameter(String),
    /// A file, corpus, or checkpoint is missing or malformed.
    Data(String),
    /// A linear system is numerically singular.
    Singular(String),
    /// An iteration diverged; carries the residual-norm trace.
    Divergence {
        message: String,
        residual_norms: Vec<f64>,
    },
    /// A forward or training pass produced a non-finite value.
    Numeric(String),
    /// An internal invariant was violated (e.g. non-scalar loss).
    Contract(String),
    /// Filesystem failure wrapped with the offending path.
    Io(String),
}

impl CsError {
    pub fn dimension(msg: impl Into<String>) -> Self {
        CsError::Dimension(msg.into())
    }

    pub fn parameter(msg: impl Into<String>) -> Self {
        CsError::Parameter(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CsError::Data(msg.into())
    }
}

impl fmt::Display for CsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CsError::Dimension(m) => write!(f, "dimension error: {m}"),
            CsError::Parameter(m) => write!(f, "parameter error: {m}"),
            CsError::Data(m) => write!(f, "data error: {m}"),
            CsError::Singular(m) => write!(f, "singular system: {m}"),
            CsError::Divergence {
                message,
                residual_norms,
            } => write!(
                f,
                "divergence: {message} ({} residual norms recorded)",
                residual_norms.len()
            ),
            CsError::Numeric(m) => write!(f, "numeric error: {m}"),
            CsError::Contract(m) => write!(f, "contract violation: {m}"),
            CsError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for CsError {}

pub type Result<T> = std::result::Result<T, CsError>;
