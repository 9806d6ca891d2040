use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid distribution: {field}: {reason}")]
    InvalidDistribution { field: String, reason: String },

    #[error("unsupported distribution for {op}: {reason}")]
    UnsupportedDistribution { op: &'static str, reason: String },

    #[error("ill-posed window: {0}")]
    IllPosedWindow(String),

    #[error("environment window [{lo}, {hi}] does not cover site {site}")]
    WindowTooSmall { lo: i64, hi: i64, site: i64 },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("singular linear system at row {row}")]
    SingularSystem { row: usize },

    #[error("no convergence within barrier {r_max}: last decrement {last_decrement:e} (last value {last_value})")]
    NonConvergence {
        r_max: i64,
        last_value: f64,
        last_decrement: f64,
    },

    #[error("enumeration of {configs} configurations exceeds cap {cap}")]
    EnumerationCap { configs: f64, cap: u64 },

    #[error("too many dropped samples: {dropped} of {total}")]
    TooManyDropped { dropped: usize, total: usize },

    #[error("Monte Carlo estimate unusable: {0}")]
    DegenerateEstimate(String),

    #[error("recursion denominator non-positive ({0}) in branch weight")]
    BranchDenominator(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
