//! Desk-scale testbed for staged RL training pipelines.
//!
//! The library models a cluster of training workers fed by a rollout stage,
//! and provides the two mechanisms the binary exercises end to end:
//!
//! * a profile-driven parallelism selector that picks a tensor/data
//!   parallelism configuration per context-length bucket and switches at
//!   bucket boundaries with hysteresis, and
//! * a layout-aware data dispatcher that routes batch shards directly
//!   between workers instead of funnelling everything through the
//!   controller, falling back to gather-and-scatter only for tensors that
//!   genuinely need central aggregation.
//!
//! Supporting modules cover the memory and data-volume cost models
//! ([`model`]), an alpha-beta network simulator and a TCP transport that
//! speak the same framed wire format ([`transport`]), a deterministic
//! synthetic workload plus the step loop that ties the stages together
//! ([`orchestrator`]), config and profile file handling ([`config`]), and
//! trace reporting ([`report`]).

pub mod cli;
pub mod config;
pub mod dispatch;
pub mod model;
pub mod orchestrator;
pub mod report;
pub mod selector;
pub mod transport;

pub use model::{ClusterSpec, ModelSpec, ParallelismConfig, WorkerId};
