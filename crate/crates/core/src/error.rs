use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The rule an infeasible action breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionRule {
    /// The node is already part of the tour.
    Visited,
    /// A delivery was chosen before its pickup.
    Precedence,
    /// The depot is never a selectable action.
    Depot,
}

impl std::fmt::Display for ActionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActionRule::Visited => write!(f, "node already visited"),
            ActionRule::Precedence => write!(f, "delivery before its pickup"),
            ActionRule::Depot => write!(f, "depot is not an action"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid instance size: {0}")]
    InvalidSize(String),

    #[error("invalid tour: {0}")]
    InvalidTour(String),

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("infeasible action {node}: {rule}")]
    InfeasibleAction { node: usize, rule: ActionRule },

    #[error("instance too large for exact solver: {customers} customers exceeds cap {cap}")]
    TooLarge { customers: usize, cap: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("every entry of a softmax row is masked")]
    MaskExhausted,

    #[error("gradient unavailable: {0}")]
    GradientUnavailable(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid gap reference {0}: must be positive")]
    InvalidReference(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; diagnostics in {dump:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        dump: PathBuf,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
