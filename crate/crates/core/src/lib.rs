//! Dense monocular SLAM core: direct photometric tracking, fusion of predicted
//! key-frame depth with small-baseline stereo, pose-graph optimization, a
//! semantically labeled global model and trajectory/depth metrics.
//!
//! The crate is `no_std` and needs only `alloc`; file formats, threading and the
//! command line live in the `depthfuse` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod evaluation;
pub mod geometry;
pub mod global_model;
pub mod image;
pub mod keyframe;
pub mod pose_graph;
pub mod prediction;
pub mod refinement;
pub mod synthetic;
pub mod tracking;

pub use geometry::{CameraIntrinsics, GeometryError, PixelCoord, RigidPose, Twist};
pub use image::{DepthMap, GradientMap, Image, IntensityImage};
pub use keyframe::KeyFrame;
