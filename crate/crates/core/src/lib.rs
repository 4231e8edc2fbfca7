//! Offline multi-session LiDAR anchoring against a building model.
//!
//! A ground-truth session is simulated from the model, a drifted query
//! session is aligned to it through per-session anchor nodes in a pose graph,
//! and the aligned map is compared against the model to extract new objects.

// `!(x > 0.0)` style checks are used on purpose so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod change;
pub mod cloud;
pub mod eval;
pub mod geometry;
pub mod pgo;
pub mod pipeline;
pub mod registration;
pub mod scan_context;
pub mod se3;
pub mod session;
pub mod sim;
pub mod textfmt;

pub use cloud::PointCloud;
pub use se3::{Pose, Twist};
pub use session::Session;
