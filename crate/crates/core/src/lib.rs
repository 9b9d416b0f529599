//! Multi-image reasoning data synthesis and focus-centric chain execution.
//!
//! The synthesis pipeline runs bottom-up over an image directory:
//!
//! 1. [`extract`] builds a structured profile per image,
//! 2. [`connect`] proposes related image pairs within capped groups,
//! 3. [`annotate`] types each pair as temporal / spatial / semantic,
//! 4. [`pathgen`] samples simple paths through the resulting graph and
//!    [`question`] turns each path into chained sub-question records.
//!
//! [`chain`] runs the inference-time loop (plan a sub-question and its image
//! focus, answer on that focus, decide whether to stop). [`dataset`] handles
//! shard persistence and statistics, and [`quality`] implements the human
//! review protocol (majority validity and Fleiss' kappa).

pub mod backend;
pub mod json;
pub mod model;
pub mod stage;

pub mod annotate;
pub mod chain;
pub mod connect;
pub mod dataset;
pub mod extract;
pub mod pathgen;
pub mod pipeline;
pub mod quality;
pub mod question;
pub mod rng;

#[cfg(test)]
pub(crate) mod testutil;

pub use backend::{BackendConfig, ModelClient, ModelRequest, ModelResponse, RoleTag};
pub use model::{ImageProfile, ImageRef, ImageStore, RelationEdge, RelationType, RelevanceGraph};
pub use stage::{QuarantineEntry, StageError};
