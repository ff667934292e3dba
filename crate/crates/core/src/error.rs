use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One problem found while validating an experiment configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    /// Dotted path of the offending field, e.g. `gene.lambda`.
    pub field: String,
    /// 1-based line in the source text, when it could be located.
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "combined support has {size} points, cap is {cap}; subsample or quantize the measures"
    )]
    SupportTooLarge { size: usize, cap: usize },

    #[error("series of length {len} is too short, need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },

    #[error("degenerate asymptotic variance estimate {0:e}")]
    DegenerateVariance(f64),

    #[error("every stopping time was censored: horizon too short")]
    AllCensored,

    #[error("residual step requested where the substochastic part has full mass")]
    FullMass,

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("{} configuration problem(s):\n{}", .0.len(), format_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    /// Stable machine-readable code, used by the command line runner.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "E_INVALID_PARAMETER",
            Error::SupportTooLarge { .. } => "E_SUPPORT_TOO_LARGE",
            Error::SeriesTooShort { .. } => "E_SERIES_TOO_SHORT",
            Error::TooFewSamples { .. } => "E_TOO_FEW_SAMPLES",
            Error::DegenerateVariance(_) => "E_DEGENERATE_VARIANCE",
            Error::AllCensored => "E_ALL_CENSORED",
            Error::FullMass => "E_FULL_MASS",
            Error::InvalidWeights(_) => "E_INVALID_WEIGHTS",
            Error::Config(_) => "E_CONFIG",
            Error::Io(_) => "E_IO",
            Error::ThreadPool(_) => "E_THREAD_POOL",
        }
    }

    /// Process exit status for this error.
    pub fn exit_status(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) => 2,
            Error::DegenerateVariance(_) => 3,
            Error::AllCensored => 4,
            _ => 5,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
