//! Duration-controllable generation with spoken time markers.
//!
//! A response is planned as a token stream interleaved with markers such as
//! `<6.8 seconds>` that state how long the response has been speaking so far.
//! The crate covers the whole loop at desk scale:
//!
//! - [`codec`]: marker text format, stripping, insertion into aligned transcripts
//! - [`reward`]: verifiable reward suite over a marker list and a target duration
//! - [`grpo`]: group-relative advantages, clipped surrogate with KL penalty, SFT mixing
//! - [`vocab`] and [`policy`]: a tabular autoregressive policy with analytic gradients
//! - [`clock`] and [`dataset`]: a deterministic speech-duration oracle and the
//!   self-generated marker dataset built from it
//! - [`eval`]: MAE/MAPE, binned reports, marker statistics
//! - [`config`] and [`pipeline`]: reproducible end-to-end runs
//!
//! See `examples/` for one runnable program per capability.

pub mod clock;
pub mod codec;
pub mod config;
pub mod dataset;
mod error;
pub mod eval;
pub mod grpo;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod vocab;

pub use error::{Error, Result};
