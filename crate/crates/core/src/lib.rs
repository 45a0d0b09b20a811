//! Calibrationless parallel-MRI toolkit.
//!
//! Computes ESPIRiT coil maps from autocalibration data, trains a compact
//! convolutional estimator that predicts the maps directly from
//! uniformly-undersampled multi-channel data, and reconstructs images via
//! CG-SENSE and L1-ESPIRiT (FISTA), with NRMSE/PSNR/correlation evaluation.
//! A bundled synthetic multi-coil simulator provides desk-scale datasets.

pub mod calibrate;
pub mod cli;
pub mod container;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod kspace;
pub mod metrics;
pub mod recon;
pub mod simulate;

pub use error::{Error, Result};
