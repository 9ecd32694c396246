//! Single-channel speech dereverberation toolkit.
//!
//! The pipeline: simulate reverberant/clean pairs with an image-source room
//! model, train a mask-estimating generator (convolutional + BLSTM + FC)
//! against a least-squares adversarial discriminator with an L1 term on the
//! phase-sensitive target, then run the frozen generator offline or in
//! chunked online mode. Quality is scored with SRMR, log-spectral distance
//! and SI-SDR.

pub mod arch;
pub mod corpus;
pub mod dsp;
pub mod engine;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod rir;
pub mod train;

pub use error::{Error, Result};
