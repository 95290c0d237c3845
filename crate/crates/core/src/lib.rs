//! Passive RF localization and tracking of a moving emitter.
//!
//! The crate covers the whole evaluation chain:
//!
//! * [`geodesy`]: WGS-84 to local east/north conversion,
//! * [`dataio`]: log parsing, timestamp alignment, cleaning, segment files,
//! * [`tdoa`]: TDoA forward model and Gauss-Newton multilateration,
//! * [`motionmodels`]: CV / CA / CT kinematics, Jacobians and process noise,
//! * [`ekf`]: segment-wise extended Kalman filtering,
//! * [`metrics`]: error statistics, CDFs and per-segment reports,
//! * [`cli`]: the `simulate` / `track` / `evaluate` pipelines behind the
//!   `rftrack` binary.

// Negated comparisons are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataio;
pub mod ekf;
pub mod geodesy;
pub mod metrics;
pub mod motionmodels;
pub mod tdoa;

pub use dataio::{AlignedPair, Segment, SegmentPlan, TimedSample};
pub use ekf::{FilterConfig, FilterState, RMode, Track};
pub use geodesy::{EnuPoint, GeoPoint};
pub use motionmodels::{MotionKind, NoiseSigmas};
pub use tdoa::{SensorArray, TdoaMeasurement};
