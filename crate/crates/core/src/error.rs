//! Error taxonomy shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// System parameters violate a structural requirement (masses, radius, packing).
    #[error("invalid system: {0}")]
    InvalidSystem(String),

    /// A phase point violates a precondition (overlap, normalization, dimensions).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// An operation was called outside its contract (receding pair, off-contact resolve, ...).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// Inter-collision gap fell below the accumulation alarm; numerics are no longer trustworthy.
    #[error("accumulation alarm at t = {time}: gap {gap} below {alarm}")]
    AccumulationAlarm { time: f64, gap: f64, alarm: f64 },

    /// A runtime self-check (overlap audit, reprojection residual) failed.
    #[error("consistency check failed: {0}")]
    Consistency(String),

    /// More simultaneous events than the branch enumerator supports.
    #[error("unsupported degeneracy: {0}")]
    UnsupportedDegeneracy(String),

    /// A segment is too close to a tangency or double collision for tangent work.
    #[error("singular segment: {0}")]
    SingularSegment(String),

    /// A search ran out of its time or event budget.
    #[error("horizon exhausted: {0}")]
    HorizonExhausted(String),

    /// The supplied vector is not in the neutral space within tolerance.
    #[error("not neutral: {0}")]
    NotNeutral(String),

    /// A singular value fell inside the rank-decision ambiguity band.
    #[error("ambiguous rank: {0}")]
    AmbiguousRank(String),

    /// Finite differencing could not hold the collision sequence fixed.
    #[error("finite-difference sequence unstable: {0}")]
    FdUnstable(String),

    /// Rejection sampling exceeded its retry budget.
    #[error("sampling budget exhausted: {0}")]
    SamplingExhausted(String),

    /// A matrix routine failed to converge or met a singular pivot.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type CoreResult<V> = Result<V, CoreError>;
