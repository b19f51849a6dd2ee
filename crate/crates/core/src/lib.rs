//! Global motion correspondence between two featured point clouds.
//!
//! Each cloud gets a pair of small MLP fields that map every point into a
//! shared canonical space with a per-point rigid transform. Points are
//! matched there by a feature-aware energy, and the two transforms of a
//! matched pair compose into a relative motion that can be interpolated or
//! extrapolated in time.
//!
//! The pieces, roughly in pipeline order:
//!
//! - [`synthgen`] builds synthetic two-state scenes with ground truth.
//! - [`pointset`] reads and writes PLY, reduces features and normalizes.
//! - [`field`] and [`nn`] hold the fields and their autodiff.
//! - [`energy`] and [`isometry`] define the loss, [`trainer`] optimizes it.
//! - [`motion`] extracts relative transforms and writes frames.
//! - [`metrics`] scores interpolation sweeps.

pub mod cli;
pub mod energy;
pub mod error;
pub mod field;
pub mod geometry;
pub mod isometry;
pub mod kdtree;
mod matmul;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod pointset;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{Quaternion, Se3, Vec3};
pub use motion::MotionModel;
pub use pointset::{load_ply, save_ply, FeaturedPointCloud, NormStats};
pub use synthgen::{generate, SceneSpec};
pub use trainer::{prepare_pair, TrainConfig, Trainer};
