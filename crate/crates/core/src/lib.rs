//! Statistical models for relative sea-level (RSL) reconstruction.
//!
//! The crate provides a shared observation data model plus a hierarchy of
//! process models and analysis methods over it:
//!
//! * [`trend`] — temporally linear least squares and Bayesian
//!   errors-in-variables change-point regression;
//! * [`gp`] — empirical-Bayes temporal Gaussian-process regression with
//!   noisy-input (NIGP) handling of age uncertainty and rate curves;
//! * [`igp`] — fully Bayesian errors-in-variables integrated GP, placing the
//!   prior on the rate process;
//! * [`spacetime`] — multi-scale spatio-temporal GP with component
//!   decomposition;
//! * [`statespace`] — multi-model Kalman filtering/smoothing over a
//!   fingerprint-structured sea-level state space;
//! * [`reductions`] — EOF regression and virtual-station regional averaging;
//! * [`validation`] — synthetic-truth generation, residual/ACF diagnostics,
//!   coverage and leave-site-out cross-validation.

pub mod data;
pub mod engines;
pub mod error;
pub mod gp;
pub mod igp;
pub mod kernels;
pub mod linalg;
pub mod reductions;
pub mod spacetime;
pub mod statespace;
pub mod trend;
pub mod validation;

pub use data::{load_csv, write_csv, ColumnMap, Dataset, ObsKind, Observation};
pub use engines::{maximize, sample, BoundedParam, SampleChain, Transform};
pub use error::{Error, Result};
pub use kernels::{angular_distance, melt_kernel, parse_kernel, Fingerprint, Kernel, MaternNu, Point};
