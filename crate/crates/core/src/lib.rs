//! Difference-in-differences estimation for staggered treatment adoption.
//!
//! The crate is organised as a pipeline. [`panel`] loads and validates a
//! balanced panel, [`did2x2`] holds the two-group two-period estimators and
//! their influence functions, [`staggered`] builds group-time effects from
//! them, [`aggregate`] turns those into event-study curves and [`inference`]
//! adds clustered standard errors, simultaneous bands, pre-trend tests and
//! sensitivity bounds. [`diagnostics`] covers balance tables and two-way
//! fixed-effects comparisons, and [`simulate`] draws panels with known
//! effects.
//!
//! ```
//! use didlab::aggregate::event_study;
//! use didlab::simulate::{simulate_staggered, DgpConfig};
//! use didlab::staggered::{att_gt, AttGtSettings};
//!
//! let (panel, truth) = simulate_staggered(&DgpConfig { n_units: 400, ..Default::default() }).unwrap();
//! let table = att_gt(&panel, &AttGtSettings::default()).unwrap();
//! let curve = event_study(&table).unwrap();
//! assert_eq!(curve.points.len(), truth.event_study.len());
//! ```

// Negated comparisons are how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod diagnostics;
pub mod did2x2;
pub mod inference;
pub(crate) mod linalg;
pub mod nuisance;
pub mod panel;
pub mod simulate;
pub mod staggered;
