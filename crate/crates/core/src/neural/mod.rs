//! Learned dynamics models: feed-forward and residual networks trained on
//! transition data, their input Jacobians, and temporal smoothing of those
//! Jacobians.

mod mat;
pub mod network;
pub mod smoothing;
pub mod train;

pub use network::{init_network, Activation, Architecture, Network, NetworkSpec, Normalization, TargetMode};
pub use smoothing::{smooth_jacobians, Boundary, FilterConfig};
pub use train::{train, Optimizer, TrainReport, TrainSettings};

use crate::ilqr::{Linearization, LinearizationSchedule, Trajectory};
use crate::par::Execution;
use crate::{ActionVector, StateVector};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid training settings: {0}")]
    InvalidSettings(String),
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("network produced non-finite output at step {step}")]
    NonFinite { step: usize },
    #[error("i/o error: {0}")]
    Io(String),
}

/// Free-function form of [`Network::predict`].
pub fn predict(net: &Network, x: &StateVector, u: &ActionVector) -> Result<StateVector, NetworkError> {
    net.predict(x, u)
}

/// Free-function form of [`Network::input_jacobians`].
pub fn input_jacobians(
    net: &Network,
    x: &StateVector,
    u: &ActionVector,
) -> Result<(nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>), NetworkError> {
    net.input_jacobians(x, u)
}

/// Network Jacobians along every `(x_t, u_t)` of `traj`.
pub fn linearize_trajectory(net: &Network, traj: &Trajectory) -> Result<LinearizationSchedule, NetworkError> {
    linearize_trajectory_with(net, traj, Execution::default())
}

pub fn linearize_trajectory_with(
    net: &Network,
    traj: &Trajectory,
    exec: Execution,
) -> Result<LinearizationSchedule, NetworkError> {
    let steps = exec.map_range(traj.actions.len(), |t| {
        let (a, b) = net.input_jacobians(&traj.states[t], &traj.actions[t])?;
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(NetworkError::NonFinite { step: t });
        }
        Ok(Linearization { a, b })
    });
    Ok(LinearizationSchedule {
        steps: steps.into_iter().collect::<Result<_, _>>()?,
    })
}
