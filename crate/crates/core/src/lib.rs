//! FMCW lidar teach-and-repeat localization toolkit.
//!
//! The crate provides two odometry backends over synthetic or recorded FMCW
//! lidar data — a correspondence-free Doppler velocity estimator and a
//! continuous-time point-to-plane ICP estimator — plus the topometric
//! teach-and-repeat pipeline that dead-reckons between map-matching updates,
//! a synthetic lidar world for closed-loop verification, and the evaluation
//! tooling (component RMSE, runtime accounting, Pareto knee selection) used
//! to study the accuracy/compute trade-off of the localization interval.

pub mod cloud;
pub mod doppler;
pub mod eval;
pub mod geom;
pub mod graph;
pub mod icp;
pub mod kdtree;
pub mod reduce;
pub mod sim;
pub mod sweep;

pub use geom::{Pose, Twist};
