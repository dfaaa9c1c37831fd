//! Grounded counting for visual question answering.
//!
//! Three counting heads share one language front end: a question LSTM and a
//! gated-tanh scoring function that rates every detected object against the
//! question. `SoftCount` sums per-object sigmoids, `UpDown` attends and
//! classifies, and `IRLC` counts by sequentially selecting objects, trained
//! with a self-critical policy gradient.

pub mod autodiff;
pub mod checkpoint;
pub mod counters;
pub mod data;
pub mod eval;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod gradcheck;
pub mod grounding;
pub mod harness;
pub mod language;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
