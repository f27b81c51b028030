//! Desk-scale codec language model toolkit.
//!
//! Covers the full loop on synthetic speech-like features: residual vector
//! quantization, delayed-pattern token scheduling, a GPT-style decoder with
//! parallel codebook group heads, adaptive codebook loss weighting, sampling
//! with streaming generation (real-time factor and latency accounting), and
//! a training/evaluation harness.

pub mod error;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod patterns;
pub mod rvq;

pub use error::{Error, Result};
