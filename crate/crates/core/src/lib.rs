//! Streaming skeleton gesture recognition on a single CPU thread.
//!
//! The engine recognizes gestures in a continuous skeleton stream through a
//! sparse three-stage mechanism: a parameter-free motion analyzer gates a
//! tiny always-on binary detector, and the detector wakes a three-layer
//! recognizer only while a gesture is in progress. Both models are recurrent
//! cells whose hidden state lives outside the model, owned by the stream
//! session, so it can be zeroed (gated) mid-stream.
//!
//! Modules:
//! - [`nn`]: dense math, losses, Adam, clipping, LR decay, gradient checking
//! - [`model`]: the recurrent cell, detector/recognizer, serialization
//! - [`analyzer`]: the motion-discontinuity monitor
//! - [`pipeline`]: the per-frame three-stage state machine
//! - [`training`]: per-frame streaming training on segmented clips
//! - [`data`]: canonical dataset formats, loaders, synthetic generator
//! - [`eval`]: online evaluation protocol and metrics

pub mod analyzer;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
