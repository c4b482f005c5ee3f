//! Spatio-temporal demand forecasting with a multi-view fusion network.
//!
//! Local spatial structure comes from a GCN over a fixed graph, global spatial
//! structure from cosine re-weighted linear attention, and temporal structure from
//! a stack of dense and depthwise dilated causal convolutions.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod spatial;
pub mod synth;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};
