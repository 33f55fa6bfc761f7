//! Diffusion-based recovery of deterministic process traces from
//! stochastically-known event logs.
//!
//! The pipeline: parse or simulate a DK log ([`event_log`], [`simulate`]),
//! corrupt it into SK traces ([`noise_synth`]), mine a flow matrix
//! ([`process_model`]), train a guided U-net denoiser ([`denoiser`],
//! [`diffusion`]) and compare recoveries against the argmax baseline
//! ([`eval`]).

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod event_log;
pub mod noise_synth;
pub mod process_model;
pub mod simulate;

pub use error::{Error, Result};
pub use event_log::{argmax_decode, Alphabet, Dataset, DkTrace, MatrixKind, SkTrace, TraceMatrix, TracePair};
