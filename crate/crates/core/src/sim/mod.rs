//! Model-driven session generation: rasterize, plan, scan, and drift.

pub mod coverage;
pub mod grid;
pub mod lidar;
pub mod scene;
pub mod simulate;

use thiserror::Error;

use crate::session::SessionError;

pub use coverage::{coverage_cells, coverage_path, densify, subsample_goals, Waypoint, DEFAULT_STRIDE};
pub use grid::{rasterize, Cell, OccupancyGrid, DEFAULT_SLICE};
pub use lidar::{raycast_scan, LidarSpec};
pub use simulate::{inject_drift, offset_session, simulate_session, simulate_trajectory, DriftModel, SimParams};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no interior: {0}")]
    NoInterior(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Session(#[from] SessionError),
}
