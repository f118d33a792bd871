//! State-of-charge estimation for lithium-ion cells.
//!
//! The crate is organised around a second-order equivalent circuit model
//! (series resistance plus two RC branches driven by an OCV source):
//!
//! - [`ecm`]: the model itself, used both as the simulator and as the
//!   estimators' internal model.
//! - [`fitting`]: OCV table construction from slow sweeps and
//!   Levenberg-Marquardt fitting of the passive components.
//! - [`filters`]: Coulomb counting and the EKF, plus the two adaptive EKFs
//!   (maximum-likelihood and covariance-matching noise adaptation) with
//!   constant-time sliding-window statistics.
//! - [`bench`]: Monte Carlo harness for window-size, noise and
//!   parameter-error sweeps.
//! - [`io`]: CSV profiles, parameter documents and run manifests.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod ecm;
pub mod error;
pub mod filters;
pub mod fitting;
pub mod io;

pub use ecm::{CellState, EcmParams, OcvTable, Profile};
pub use error::{Error, Result};
pub use filters::{EstimatorKind, FilterState, StepRecord, WindowStats};
