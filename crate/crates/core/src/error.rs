use thiserror::Error;

use crate::audit::AuditError;
use crate::env::EnvError;
use crate::metrics::MetricsError;
use crate::reward_models::RewardModelError;
use crate::shaping::ShapingError;
use crate::trainer::TrainError;
use crate::trajectory::TrajectoryError;

/// Any library error.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Shaping(#[from] ShapingError),
    #[error(transparent)]
    RewardModel(#[from] RewardModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}
