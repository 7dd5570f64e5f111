//! StyleAE: an autoencoder plugin that re-parameterizes the style space of a
//! frozen generator so that labelled attributes become single coordinates.
//!
//! The crate bundles the frozen procedural generator ([`syngen`]), the plugin
//! and its training loop ([`styleae`]), the evaluation probe ([`probes`]),
//! editing and projection ([`editkit`]), image metrics ([`metrics`]) and the
//! end-to-end [`pipeline`].

pub mod editkit;
pub mod envelope;
mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod probes;
pub mod styleae;
pub mod syngen;

pub use error::{Error, Result};
pub use image::ImageGrid;
