//! Self-supervised speech restoration core.
//!
//! Everything in this crate is pure computation over in-memory values:
//! signal analysis, simulated degradations, the analysis / channel / synthesis
//! networks with a small reverse-mode autodiff tape, the training objectives,
//! the three training procedures, inference and objective metrics.
//! File formats, configuration files and the command line live in the
//! `unsup-restore` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod degrade;
pub mod dsp;
mod error;
pub mod fft;
pub mod infer;
pub mod losses;
pub(crate) mod math;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Canonical sample rate used across every pipeline stage.
pub const SAMPLE_RATE: u32 = 22_050;
