use thiserror::Error;

/// Errors surfaced by geometric operations.
///
/// Numerical *failures* (an identity exceeding its tolerance) are not errors;
/// they are reported through [`crate::report::ResidualReport`]. Errors are
/// reserved for malformed inputs and for situations where a computation
/// cannot proceed at all (rank loss, frame discontinuity, sign conditions).
#[derive(Debug, Error)]
pub enum GeomError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("factor index {index} out of range for {len} factors")]
    FactorIndex { index: usize, len: usize },

    #[error("factor {factor}: model constraint violated, residual {residual:.3e}")]
    ConstraintViolation { factor: usize, residual: f64 },

    #[error("factor {factor}: point lies on the wrong sheet (x0 <= 0)")]
    WrongSheet { factor: usize },

    #[error("vector is not tangent at the base point (factor {factor}, defect {defect:.3e})")]
    NotTangent { factor: usize, defect: f64 },

    #[error("induced metric is not positive definite")]
    DegenerateMetric,

    #[error("normal frame incomplete: achieved rank {achieved}, need {needed}")]
    FrameRank { achieved: usize, needed: usize },

    #[error("frame field discontinuity across stencil (overlap determinant {overlap:.3})")]
    FrameContinuation { overlap: f64 },

    #[error("eigenvalue {value:.4} of T_{factor} falls inside the spectral gap [0.1, 0.9]")]
    SpectralGap { factor: usize, value: f64 },

    #[error("bundle dimension jumps across the grid: {0}")]
    DimensionJump(String),

    #[error("weights must satisfy sum a_i^2 = 1 (defect {0:.3e})")]
    WeightConstraint(f64),

    #[error("curvatures must share one sign: k_{i} k_{j} <= 0")]
    MixedSigns { i: usize, j: usize },

    #[error("projection onto factor {factor} is not a similarity (gram defect {defect:.3e})")]
    NotSimilarity { factor: usize, defect: f64 },

    #[error("k_i R_i = k_j R_j fails on the grid (max defect {0:.3e})")]
    NotProportional(f64),

    #[error("compatibility failure at {label} (residual {residual:.3e}, tolerance {tol:.1e})")]
    Incompatible { label: String, residual: f64, tol: f64 },

    #[error("holonomy residual {0:.3e} exceeds the integrability tolerance")]
    NotIntegrable(f64),

    #[error("constraint violation after normalization: {0}")]
    Renormalization(String),

    #[error("frame correspondence is not an ambient isometry (gram mismatch {0:.3e})")]
    NoIsometry(f64),

    #[error("factorization hypothesis failed: {0}")]
    Hypothesis(String),

    #[error("invalid immersion spec: {0}")]
    InvalidSpec(String),

    #[error("parameter {0:?} lies outside the declared domain")]
    OutOfDomain(Vec<f64>),

    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

pub type Result<T> = std::result::Result<T, GeomError>;
