//! Sparse-to-dense feature distillation for LiDAR 3D detection, desk scale.
//!
//! The pipeline: synthesize tracked multi-frame LiDAR sequences, fuse each
//! object's points across frames into a dense per-object cloud, compose dense
//! scenes, and train a dense-input teacher detector followed by a sparse-input
//! student that learns to imitate the teacher's dense features through a
//! BEV densification block (S2D) and an auxiliary voxel point-cloud
//! reconstruction head (PCR).
//!
//! Everything runs on an in-crate f64 reverse-mode autodiff tape
//! ([`tensor`]), so gradients are finite-difference checkable end to end.

pub mod augment;
pub mod bench;
pub mod dense;
pub mod detector;
pub mod error;
pub mod evalmetrics;
pub mod geom;
pub mod io;
pub mod loss;
pub mod nn;
pub mod pcr;
pub mod s2d;
pub mod schedule;
pub mod synth;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use geom::{ClassId, OrientedBox, Point3, VoxelSpec};
