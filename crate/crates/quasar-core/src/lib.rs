//! Quantization-aware architecture search for small vision transformers,
//! together with the hardware models that drive it: row-wise mixed-precision
//! quantization, bit-exact DSP-packing arithmetic, analytical FPGA
//! resource/latency estimation, a weight-entangled toy supernet, and an
//! FPS-constrained evolution search.

pub mod data;
pub mod dsp;
pub mod error;
pub mod evo;
pub mod hw;
pub mod manifest;
pub mod nas;
pub mod pipeline;
pub mod quant;
pub mod qvt;
pub mod vit;

pub use error::{Error, Result};
