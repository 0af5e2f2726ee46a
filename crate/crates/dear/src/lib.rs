//! Deep-learning audio watermarking robust to re-recording.
//!
//! An encoder embeds a binary watermark into the approximate DWT
//! coefficients of an audio segment, a differentiable distortion pipeline
//! simulates the re-recording channel during training, and a decoder
//! recovers the watermark. Shipped as a library plus the `dear` CLI with
//! train / embed / extract / attack / evaluate workflows.

pub mod channel;
pub mod error;
pub mod grad;
pub mod net;
pub mod signal;
pub mod trainer;
pub mod wavelet;

pub use error::{DearError, Result};
