//! Context-aware Sparse Spatiotemporal Learning (CSSL) building blocks.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`tape::Tape`]) over dense f64 tensors. On top of it sit the CSSL
//! blocks (thresholded convolution, residual block, convolutional
//! recurrent units with soft reset), exact synaptic-operation
//! accounting, a synthetic event-camera pipeline, desk-scale detection
//! and optical-flow models, and a deterministic training loop.
//!
//! Everything is deliberately CPU-only and 64-bit: the sizes involved
//! are small enough that reproducibility and checkability matter more
//! than throughput.

pub mod blocks;
pub mod events;
pub mod gradcheck;
pub mod models;
pub mod params;
pub mod rng;
pub mod sop;
pub mod tape;
pub mod train;
pub mod tensor;

pub use tape::{StepMode, Tape, Var};
pub use tensor::{ShapeError, Tensor};
