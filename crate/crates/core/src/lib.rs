//! Speech enhancement over residual-vector-quantized token streams.
//!
//! The pipeline: a deterministic frame-domain frontend turns waveforms into
//! compact spectral feature frames; a residual vector quantizer tokenizes
//! them; a masked-token transformer learns to restore clean tokens from
//! degraded inputs under joint discrete/continuous/semantic conditioning;
//! and an iterative unmasking decoder — optionally seeded by quantization
//! error instead of randomness — reconstructs the clean token grid, which
//! the frontend resynthesizes to audio.

pub mod ckpt;
pub mod error;
pub mod grid;
pub mod infer;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod rvq;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
