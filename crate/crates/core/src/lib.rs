//! Asynchronous graph neural network inference over event-camera streams.

pub mod error;
pub mod events;
pub mod graph;
pub mod layers;
pub mod network;
pub mod asynch;
pub mod detect;
pub mod metrics;

pub use error::{Error, Result};
