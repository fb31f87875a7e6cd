//! Simulation and decoding of superimposed OFDM frames from transmitters
//! with independent oscillators.
//!
//! The receive pipeline is: two-step preamble detection ([`detector`]),
//! per-source channel, timing and frequency tracking ([`synchronizer`]), and
//! per-cell joint maximum-likelihood decoding against criteria rebuilt every
//! symbol ([`decoder`]). [`harness`] runs Monte-Carlo trials of the whole
//! chain and compares it with a receiver that applies one averaged CFO.

pub mod channel;
pub mod decoder;
pub mod detector;
pub mod error;
pub mod frame;
pub mod harness;
pub mod iq;
pub mod synchronizer;
pub mod transmitter;

pub use error::{Error, Result};
