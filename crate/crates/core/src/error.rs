use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Every variant maps to a short machine-readable class through
/// [`Error::class`], which the CLI reports alongside a nonzero exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error at `{path}`: {msg}")]
    Schema { path: String, msg: String },

    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),

    #[error("unknown bus id {0}")]
    UnknownBus(u32),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("network is disconnected; isolated component contains buses {0:?}")]
    Disconnected(Vec<u32>),

    #[error("power flow did not converge after {iterations} iterations (max mismatch {mismatch:.3e} p.u.)")]
    NonConvergence { iterations: usize, mismatch: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("algebraic singularity: g_y is not invertible at the evaluation point")]
    AlgebraicSingularity,

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("no positive real numerator root: loading direction never reaches collapse")]
    NoCollapse,

    #[error("evaluation at s = {0} hits a denominator root")]
    PoleHit(f64),

    #[error("unstable equilibrium (max Re eig = {0:.3e}); variance undefined or divergent")]
    Unstable(f64),

    #[error("no admissible margin: s_m = {s_m:.6} for s_c = {s_c:.6}")]
    NoMargin { s_c: f64, s_m: f64 },

    #[error("collapse at initialization: {0}")]
    Equilibrium(String),

    #[error("invalid machine set: {0}")]
    Machines(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("noise file: {0}")]
    Noise(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable identifier for the error family.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Schema { .. } | Error::DuplicateBus(_) => "schema",
            Error::UnknownBus(_) | Error::InvalidNetwork(_) | Error::Disconnected(_) => "network",
            Error::NonConvergence { .. } => "convergence",
            Error::Singular(_) | Error::AlgebraicSingularity => "singular",
            Error::DegenerateSeries(_) | Error::NoCollapse | Error::PoleHit(_) => "cpf",
            Error::Unstable(_) => "unstable",
            Error::NoMargin { .. } => "margin",
            Error::Equilibrium(_) | Error::Machines(_) => "dynamics",
            Error::Config(_) => "config",
            Error::Noise(_) => "noise",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn schema(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
