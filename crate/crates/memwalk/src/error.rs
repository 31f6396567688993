use thiserror::Error;

/// Unified error type. Variants map to the failure classes of the public
/// API: geometry misuse, mathematical domain violations, configuration
/// problems, resource guards, kernel contract violations, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Geometric precondition broken (e.g. non-adjacent sites passed where
    /// an edge was expected).
    #[error("geometry: {0}")]
    Geometry(String),

    /// Mathematically ill-posed request (degenerate conditioning, infinite
    /// first moment where finiteness is required, ...).
    #[error("domain: {0}")]
    Domain(String),

    /// Invalid configuration; the message names the offending field.
    #[error("config: {0}")]
    Config(String),

    /// A run would exceed a sanity bound on memory before it starts.
    #[error("resource: {0}")]
    Resource(String),

    /// A registered jump kernel violated ellipticity or symmetry.
    #[error("kernel: {0}")]
    Kernel(String),

    /// Estimator precondition broken (empty sample, all-equal sample, ...).
    #[error("stats: {0}")]
    Stats(String),

    /// Analysis inputs missing or inconsistent.
    #[error("analysis: {0}")]
    Analysis(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
