//! Head similarity learning toolkit.
//!
//! Learns whole-head embeddings that rank pairs hierarchically: same identity
//! and appearance state above same identity in a different state, above
//! different identities. Provides a synthetic factor-controlled head world
//! with a frozen oracle teacher, a dual-CLS transformer encoder with manual
//! backpropagation, the hierarchical and alignment objectives, the
//! weak-supervision dataset pipeline, verification metrics and an
//! experiment runner.

pub mod error;
pub mod imaging;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod real;
pub mod relations;
pub mod runner;
pub mod seeding;
pub mod synthworld;

pub use error::{Error, Result};
