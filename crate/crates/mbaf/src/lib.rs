//! Trainable feedback coding for the two-user Gaussian multiple-access
//! channel.
//!
//! Two transmitters share an AWGN channel and receive its output over a
//! perfect feedback link. Each runs a transformer-based parity encoder over
//! its message blocks and everything it has observed so far; a joint
//! successive decoder refines per-user posteriors over several passes. The
//! whole pipeline is differentiable end to end and trained against
//! cross-entropy on the block labels.

pub mod bits;
pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod evaluation;
pub mod error;
pub mod graph;
pub mod model;
pub mod nn;
pub mod rng;
pub mod rollout;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
