use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rollout batch needs at least {min} rollouts, got {found}")]
    BatchTooSmall { min: usize, found: usize },

    #[error("rollout batch was not generated by the given distribution")]
    DistributionMismatch,

    #[error("no informative update direction (all gradients below {threshold:e})")]
    DegenerateUpdate { threshold: f64 },

    #[error("infeasible subproblem: {0}")]
    Infeasible(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    /// A warning raised while warnings are treated as errors.
    #[error("warning treated as error: {0}")]
    StrictWarning(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, found })
        }
    }
}
