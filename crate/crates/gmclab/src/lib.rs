//! Simulation and verification toolkit for log-correlated Gaussian fields and
//! complex Gaussian multiplicative chaos.

pub mod acceptance;
pub mod brw_comparator;
pub mod clt_harness;
pub mod experiment;
pub mod error;
pub mod quad;
pub mod radial;
pub mod rng;
pub mod stats;

pub mod fft;
pub mod field_sampler;
pub mod gaussian_tools;
pub mod gmc_measure;
pub mod kernel_core;
pub mod normalization;
pub mod qv_estimator;

pub use error::{Error, Result};
