//! Edge dual scene graph generation at desk scale.
//!
//! The pipeline: synthetic labeled scenes stand in for an object
//! detector; a complete primitive graph is built over the detections and
//! transformed into its edge dual (relations become nodes, adjacent
//! relations become edges); a dual message passing network learns
//! object-centric and relation-centric features jointly; classifier heads
//! and a joint cross-entropy loss train the whole thing with SGD; and a
//! scene-graph metric suite (R@K, mR@K, wmAP, weighted score) evaluates
//! the PredCls / SGCls / SGGen subtasks, including long-tail reporting.
//!
//! Everything is deterministic under a fixed seed, and the numeric core
//! carries its own reverse-mode differentiation checked against finite
//! differences.

pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod scenes;
pub mod tensor;

pub use error::{Error, Result};
