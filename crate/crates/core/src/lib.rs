//! Post-hoc enhancement for frozen time-series forecasters.
//!
//! The crate wraps a frozen forecaster `F: R^{L×d} → R^{H×m}` with small
//! trainable modules that never touch `F`'s parameters:
//!
//! * [`adapters`]: tanh-bounded input nudges and output corrections with a
//!   trust-region scale `δ`, in additive, multiplicative and exponential forms;
//! * [`selector`]: a relaxed-Bernoulli feature mask applied to the context;
//! * [`calibrators`]: a monotone quantile fan and a learned-scale split
//!   conformal calibrator.
//!
//! [`training`] drives batch, joint and leakage-free online optimization.

// `!(x > 0.0)` rejects NaN along with non-positive values; keep that form.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod autodiff;
pub mod calibrators;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod forecaster;
pub mod metrics;
pub mod selector;
pub mod training;

pub use error::{Error, Result};
