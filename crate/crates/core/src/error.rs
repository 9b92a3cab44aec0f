use thiserror::Error;

use crate::gaussian::VariableId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The point lies on (or numerically at) the principal plane of the camera.
    #[error("point lies on the camera principal plane (depth {depth:e})")]
    DepthDegenerate { depth: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("matrix is not positive definite after jitter")]
    NotPositiveDefinite,

    #[error("variable {var} has inconsistent dimensions ({left} vs {right})")]
    ScopeDimMismatch {
        var: VariableId,
        left: usize,
        right: usize,
    },

    #[error("variable {0} is not in the factor scope")]
    NotInScope(VariableId),

    /// The block being integrated out has no proper precision, i.e. some
    /// eliminated variable is unconstrained.
    #[error("elimination block is singular")]
    SingularEliminationBlock,

    #[error("transform undefined at a sigma point: {0}")]
    TransformUndefined(Box<Error>),

    #[error("cluster {cluster}: {source}")]
    InCluster {
        cluster: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("outer iteration {iteration}: {source}")]
    InOuterIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("feature {0} is observed by fewer than two cameras")]
    UnderconstrainedFeature(usize),

    #[error("duplicate observation of feature {feature} in camera {camera}")]
    DuplicateTrack { camera: usize, feature: usize },

    #[error("no visibility pattern keeps every feature observed twice after {0} attempts")]
    InfeasibleVisibility(usize),

    #[error("missing prior for {0}")]
    MissingPrior(VariableId),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scene/result mismatch: {0}")]
    Mismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
