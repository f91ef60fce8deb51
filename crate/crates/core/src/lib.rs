//! Toy multi-character talking-video diffusion with audio-to-character routing.
//!
//! The crate trains and samples a small diffusion transformer whose face and
//! audio conditioning is gated per visual token by 3D spatiotemporal routing
//! masks. Three mask-production strategies are provided: a static detector on
//! the inpainting frame, a segmenter over a coarse conditioning-free
//! generation, and a learned per-step router. Everything runs on deterministic
//! synthetic two-character clips with exact ground truth, so routing quality,
//! loss surfaces, and gradients are all checkable against oracles.

pub mod autodiff;
pub mod conditioning;
pub mod config;
pub mod dit;
pub mod error;
pub mod eval;
pub mod mask;
pub mod params;
pub mod router;
pub mod sample;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
