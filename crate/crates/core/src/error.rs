//! Error type shared by every stage of the engine.

/// Failure conditions surfaced by the library.
///
/// The registration pipeline never silently degrades: a stage that cannot
/// produce a trustworthy result reports which contract was violated.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two volumes or fields that must live on the same grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A similarity metric was asked to evaluate too small a joint mask.
    #[error("overlap of {found} voxels is below the required minimum of {min}")]
    InsufficientOverlap { found: usize, min: usize },

    /// Zero intensity variance over the overlap; correlation is undefined.
    #[error("degenerate metric: zero intensity variance over the overlap")]
    DegenerateMetric,

    /// A pyramid level lost every masked voxel.
    #[error("pyramid degenerate: level {level} has no masked voxels")]
    PyramidDegenerate { level: usize },

    /// The kinematic model geometry is inconsistent (e.g. the ray from the
    /// fixed point misses the ellipsoid).
    #[error("kinematic model invalid: {0}")]
    ModelInvalid(String),

    /// A pose tilts the probe axis beyond what the model allows.
    #[error("pose rejected: tilt {tilt_deg:.1} deg exceeds the limit of {limit_deg:.1} deg")]
    PoseRejected { tilt_deg: f64, limit_deg: f64 },

    /// No pose in the systematic search produced a valid similarity value.
    /// This is the "target out of view" signal.
    #[error("pose search failed: none of the {evaluated} evaluated poses produced a valid similarity")]
    SearchFailed { evaluated: usize },

    /// Every seed of the multi-start rigid stage ended without a valid
    /// overlap between the volumes.
    #[error("rigid registration failed: none of the {seeds} seeds reached a valid overlap")]
    RegistrationFailed { seeds: usize },

    /// The optimizer saw a non-finite objective value.
    #[error("optimizer aborted on a non-finite objective; best value {best_value} at {best_point:?}")]
    OptimizerAbort {
        best_point: Vec<f64>,
        best_value: f64,
    },

    /// The linear elasticity solver failed to reach its tolerance.
    #[error("linear solver stalled: relative residual {residual:.3e} after {cycles} cycles")]
    SolverStalled { residual: f64, cycles: usize },

    /// A phantom specification cannot be satisfied (e.g. fiducial placement
    /// exhausted its retries).
    #[error("phantom spec infeasible: {0}")]
    SpecInfeasible(String),

    /// Two fiducial sets cannot be paired by id.
    #[error("fiducial correspondence: {0}")]
    Correspondence(String),

    /// A statistic was asked for on fewer samples than it needs.
    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// A file did not conform to its declared format.
    #[error("{path}: {msg}")]
    FileFormat { path: String, msg: String },

    /// A configuration key is unknown or its value does not parse.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
