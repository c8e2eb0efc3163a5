//! Dataset I/O, prediction providers, configuration, the two-lane pipeline,
//! run artifacts and the command implementations behind the `depthfuse` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod artifacts;
pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod provider;
pub mod store;

pub use depthfuse_core as core;
