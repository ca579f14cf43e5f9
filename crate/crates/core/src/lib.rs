//! Keyframe-based RGB-D SLAM with kernelized point-cloud registration.
//!
//! Colored point clouds are treated as functions in a reproducing-kernel
//! Hilbert space; frame registration maximizes their inner product over
//! SE(3). Keyframe selection, loop-closure validation and robust pose-graph
//! optimization all reuse the same inner-product machinery.

pub mod bow;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod frontend;
pub mod kdtree;
pub mod loop_closure;
pub mod pipeline;
pub mod pose_graph;
pub mod registration;
pub mod se3;

pub use error::{Error, Result};
pub use se3::{Pose, Rotation, Twist};
