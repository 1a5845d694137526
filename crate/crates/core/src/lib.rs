//! Test-time post-processing and evaluation for multi-instance articulated
//! object detection: part kinematics, kinematics-aware IoU (kIoU), part
//! fusion, bipartite set matching with reference loss values, instance
//! grouping, shape-space normalization and detection metrics, plus a
//! synthetic scene generator that exercises all of it.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod evaluation;
pub mod exec;
pub mod fusion;
pub mod geometry;
pub mod grouping;
pub mod io;
pub mod kinematics;
pub mod losses;
pub mod scenegen;
pub mod shapespace;
pub mod types;

pub use exec::Execution;
pub use types::{JointParams, JointType, Mat3, PartProposal, PoseSize, SceneTruth, TruthPart, Vec3};
