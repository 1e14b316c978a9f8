//! Desk-scale mixed-precision quantization pipeline for a from-scratch toy
//! vision transformer: quantizer kernels, clipped channel-wise LayerNorm
//! reparameterization, LRP-based layer importance, quantization-sensitivity
//! sweeps, and exact integer-program bit allocation.

pub mod alloc;
pub mod calibrate;
pub mod config;
pub mod crl;
pub mod data;
pub mod error;
pub mod graph;
pub mod io;
pub mod lrp;
pub mod pipeline;
pub mod quant;
pub mod qsa;
pub mod report;
pub mod rnd;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
