//! Time-aware dynamic graph embedding.
//!
//! A dynamic graph is kept as a set of temporal edges tagged with the joining
//! time of each vertex occurrence (ToV) and the timespan of each edge (ToE).
//! [`sampler`] turns it into fixed-length temporal edge sequences with a
//! time/centrality biased walk, [`model`] embeds those sequences with a
//! time-aware LSTM feeding a masked encoder/decoder plus a structure-level
//! attention stack, [`training`] optimizes the joint self-supervised
//! objective and [`eval`] scores the learned representations.

pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod synthetic;
pub mod time;
pub mod training;

pub use error::{Error, Result};
pub use graph::{DynamicGraph, Schema, TemporalEdge, VertexId, VertexOccurrence};
pub use time::{normalize_time, TimeScale};
