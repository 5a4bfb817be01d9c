//! Video restoration under synthetic adverse weather.
//!
//! The crate provides a tape-based autodiff engine over `ndarray` tensors, a
//! messenger-token video transformer with a temporal shift mechanism, an
//! adversarial weather classifier behind a gradient-reversal layer, a
//! messenger-driven decoder, a procedural rain/haze/snow video synthesizer,
//! and a deterministic training harness.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]; training
//! runs in `f32` ([`Real`]) while gradient checks and metrics use `f64`
//! ([`Wide`]).

pub mod adversarial;
pub mod check;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod messenger;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Tid};

/// Scalar type used for training and inference.
pub type Real = f32;
/// Scalar type used for gradient checks and metric accumulation.
pub type Wide = f64;
