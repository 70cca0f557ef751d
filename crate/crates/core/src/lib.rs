//! Multi-rate CSI compression for MIMO-OFDM channels with nonlinear transform
//! coding.
//!
//! The pipeline is: [`channel`] preprocessing, a learned analysis transform
//! ([`transform`]), nested-lattice quantization ([`quantizer`]), a factorized
//! logistic entropy model ([`entropy_model`]) and rANS coding ([`coder`]).
//! [`pipeline`] ties these together into a framed bitstream with
//! capacity-driven level selection and rate-distortion sweeps.

pub mod channel;
pub mod coder;
pub mod entropy_model;
mod error;
pub mod pipeline;
pub mod quantizer;
pub mod transform;

pub use error::{Error, Result};
