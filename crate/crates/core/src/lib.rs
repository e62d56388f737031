//! Closed-track driving simulator and behavioral-cloning experiment harness.
//!
//! The crate simulates a small car on a closed track, records a scripted expert,
//! trains feed-forward steering policies on the recordings, and evaluates them
//! in closed loop under varying speed and computational delay. It also measures
//! whether multi-frame inputs at an unseen speed look out-of-distribution to the
//! trained networks.

// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closedloop;
pub mod config;
pub mod dataset;
pub mod error;
pub mod expert;
pub mod geom;
pub mod learner;
pub mod ood;
pub mod report;
pub mod sensing;
pub mod study;
pub mod track;
pub mod vehicle;

pub use closedloop::{PipelineConfig, Pose, SearchConfig};
pub use dataset::{Recording, ShiftedDataset};
pub use error::{Error, Result};
pub use expert::ExpertParams;
pub use geom::Vec2;
pub use learner::{Policy, PolicySpec, TrainConfig};
pub use sensing::SensorConfig;
pub use track::{generate_default_track, Track};
pub use vehicle::{VehicleParams, VehicleState};
