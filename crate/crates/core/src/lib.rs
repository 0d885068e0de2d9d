//! Evidential ordinal regression for severity grading.
//!
//! The crate is organised around the pieces of the model and its
//! evaluation:
//!
//! - [`diffcore`]: array autodiff tape and special functions.
//! - [`nig`]: Normal–Inverse-Gamma likelihood, regularizers, uncertainty.
//! - [`bae`]: bilateral asymmetry encoder (dual spatial attention).
//! - [`memory`]: class prototype memory bank.
//! - [`model`]: synthetic data, corruptions, network, training, checkpoints.
//! - [`trust`]: ordinal metrics, ROC/PR, calibration, selective prediction,
//!   decision curves and cost profiling.
//! - [`cli`]: the `evidentia` command-line front end.

pub mod bae;
pub mod cli;
pub mod diffcore;
pub mod memory;
pub mod model;
pub mod nig;
pub mod par;
pub mod seed;
pub mod trust;
