//! Adversarial attacks and defenses for single-lead ECG rhythm classifiers.
//!
//! The crate is organized bottom-up: [`autodiff`] provides a small
//! reverse-mode engine over flat `f64` arrays, [`classifier`] builds 1D CNNs
//! on top of it, [`attacks`] implements PGD, SAP and the boundary attack,
//! [`defenses`] holds the training procedures, [`dataio`] prepares records,
//! and [`eval`] computes metrics and runs experiment protocols.

pub mod attacks;
pub mod autodiff;
pub mod classifier;
pub mod dataio;
pub mod desk;
pub mod defenses;
pub mod eval;
mod error;

pub use error::{Error, Result};
