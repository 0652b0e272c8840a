//! Contactless fingerprint pipeline: flash/non-flash capture pairs are
//! registered, segmented and fused into a single ridge image, enhanced into a
//! binarized ridge map, and embedded for matching.
//!
//! The crate is organised bottom-up:
//!
//! * [`image`], [`fft`], [`filters`] — raster containers and classic imaging ops
//! * [`geometry`] — registration, upright correction, core detection
//! * [`spectral`] — finger segmentation and flash/non-flash spectral subtraction
//! * [`nn`] — a small f64 reverse-mode autograd with conv/batchnorm/FFT ops
//! * [`fusion`], [`enhancer`], [`embedding`], [`pipeline`] — the learned stages
//! * [`evaluation`], [`synth`], [`checkpoint`] — metrics, synthetic data, model I/O
//!
//! Everything is deterministic: all randomness flows from explicit u64 seeds
//! through a counter-based ChaCha stream, and no global state is consulted.

pub mod checkpoint;
pub mod embedding;
pub mod enhancer;
pub mod error;
pub mod evaluation;
pub mod fft;
pub mod filters;
pub mod fusion;
pub mod geometry;
pub mod image;
mod loss_common;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod spectral;
pub mod synth;

pub use error::{F2pError, F2pResult};
pub use image::{BinaryMask, ImageF};
