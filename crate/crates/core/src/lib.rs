//! Desk-scale toolkit for training, compressing, and deploying causal
//! LSTM speech enhancers on microcontroller budgets.
//!
//! The crate covers the full path from synthetic data to deployable model:
//!
//! - [`dsp`]: STFT/ISTFT front end, mel filterbank, power-law compression,
//!   SNR mixing, WAV I/O.
//! - [`nn`]: dense/LSTM/batch-norm layers with exact analytic gradients.
//! - [`enhancer`]: the causal masking model (mel features in, spectral
//!   mask out) and utterance enhancement.
//! - [`metrics`]: phase-sensitive compressed spectral loss and SI-SDR.
//! - [`compression`]: structured pruning with learned thresholds and
//!   training-aware integer quantization.
//! - [`skip`]: learned frame-skipping controller for the recurrent state.
//! - [`int_engine`]: bit-exact integer-only inference over exported models.
//! - [`cost`]: size/ops/latency/energy accounting and deployment
//!   constraint checks.
//! - [`synth`]: deterministic synthetic speech/noise corpus generation.
//! - [`container`]: versioned model file format with CRC-32 integrity.

pub mod compression;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod enhancer;
pub mod nn;
pub mod skip;
pub mod train;

pub use error::{Error, Result};

/// CLI entry point; parses arguments and dispatches to a subcommand.
pub fn run() -> Result<()> {
    Ok(())
}
