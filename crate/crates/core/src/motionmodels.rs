//! Kinematic motion models: constant velocity (CV), constant acceleration
//! (CA) and constant turn (CT).
//!
//! State layouts:
//!
//! | model | state                      |
//! |-------|----------------------------|
//! | CV    | `[x, y, vx, vy]`           |
//! | CA    | `[x, y, vx, vy, ax, ay]`   |
//! | CT    | `[x, y, vx, vy, omega]`    |
//!
//! The CT state carries the turn rate `omega` (rad/s) in its fifth slot; the
//! heading itself is implicit in the velocity direction.
//!
//! Process noise follows the piecewise-constant white-noise discretization:
//! a per-axis acceleration (CV, CT) or jerk (CA) held constant over each
//! step, with x and y axes uncorrelated.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::TimedSample;
use crate::geodesy::EnuPoint;

/// Below this value of `|omega| * T` the CT update uses its series expansion.
pub const SMALL_TURN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{kind} expects a state of length {expected}, got {got}")]
    Dimension {
        kind: MotionKind,
        expected: usize,
        got: usize,
    },
    #[error("time step must be positive and finite, got {0}")]
    TimeStep(f64),
    #[error("noise sigma `{name}` must be non-negative, got {value}")]
    NegativeSigma { name: &'static str, value: f64 },
    #[error("need at least {needed} samples to estimate process noise, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("unknown motion model `{0}` (expected CV, CA or CT)")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MotionKind {
    #[serde(rename = "CV")]
    Cv,
    #[serde(rename = "CA")]
    Ca,
    #[serde(rename = "CT")]
    Ct,
}

impl MotionKind {
    pub const ALL: [MotionKind; 3] = [MotionKind::Cv, MotionKind::Ca, MotionKind::Ct];

    pub const fn state_dim(self) -> usize {
        match self {
            MotionKind::Cv => 4,
            MotionKind::Ca => 6,
            MotionKind::Ct => 5,
        }
    }

    pub const fn label(self) -> &'static str {
        match self {
            MotionKind::Cv => "CV",
            MotionKind::Ca => "CA",
            MotionKind::Ct => "CT",
        }
    }

    fn check(self, s: &DVector<f64>) -> Result<(), ModelError> {
        if s.len() != self.state_dim() {
            return Err(ModelError::Dimension {
                kind: self,
                expected: self.state_dim(),
                got: s.len(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MotionKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CV" => Ok(MotionKind::Cv),
            "CA" => Ok(MotionKind::Ca),
            "CT" => Ok(MotionKind::Ct),
            other => Err(ModelError::UnknownKind(other.to_string())),
        }
    }
}

/// Process-noise standard deviations.
///
/// `acc` (m/s²) drives CV and the translational part of CT, `jerk` (m/s³)
/// drives CA, `omega` (rad/s per step) drives the CT turn rate. Fields a
/// model does not use are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSigmas {
    pub acc: f64,
    pub jerk: f64,
    pub omega: f64,
}

impl NoiseSigmas {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, value) in [("acc", self.acc), ("jerk", self.jerk), ("omega", self.omega)] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(ModelError::NegativeSigma { name, value });
            }
        }
        Ok(())
    }
}

fn check_step(t: f64) -> Result<(), ModelError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(ModelError::TimeStep(t))
    }
}

/// Constant transition matrix of the linear models.
fn linear_transition(kind: MotionKind, t: f64) -> DMatrix<f64> {
    let n = kind.state_dim();
    let mut f = DMatrix::identity(n, n);
    match kind {
        MotionKind::Cv => {
            f[(0, 2)] = t;
            f[(1, 3)] = t;
        }
        MotionKind::Ca => {
            f[(0, 2)] = t;
            f[(1, 3)] = t;
            f[(2, 4)] = t;
            f[(3, 5)] = t;
            f[(0, 4)] = 0.5 * t * t;
            f[(1, 5)] = 0.5 * t * t;
        }
        MotionKind::Ct => unreachable!("CT has no constant transition matrix"),
    }
    f
}

/// `sin(wT)/w` and `(1 - cos(wT))/w` with their derivatives in `w`.
struct TurnTerms {
    s: f64,
    c: f64,
    ds: f64,
    dc: f64,
}

fn turn_terms(w: f64, t: f64) -> TurnTerms {
    if (w * t).abs() < SMALL_TURN {
        turn_terms_series(w, t)
    } else {
        turn_terms_exact(w, t)
    }
}

fn turn_terms_series(w: f64, t: f64) -> TurnTerms {
    let t2 = t * t;
    let t3 = t2 * t;
    TurnTerms {
        s: t - w * w * t3 / 6.0,
        c: w * t2 / 2.0 - w * w * w * t3 * t / 24.0,
        ds: -w * t3 / 3.0,
        dc: t2 / 2.0 - w * w * t3 * t / 8.0,
    }
}

fn turn_terms_exact(w: f64, t: f64) -> TurnTerms {
    let (sin, cos) = (w * t).sin_cos();
    TurnTerms {
        s: sin / w,
        c: (1.0 - cos) / w,
        ds: (t * cos * w - sin) / (w * w),
        dc: (t * sin * w - (1.0 - cos)) / (w * w),
    }
}

/// Propagates `s` forward by `t` seconds.
pub fn transition(kind: MotionKind, s: &DVector<f64>, t: f64) -> Result<DVector<f64>, ModelError> {
    kind.check(s)?;
    check_step(t)?;
    match kind {
        MotionKind::Cv | MotionKind::Ca => Ok(linear_transition(kind, t) * s),
        MotionKind::Ct => {
            let (x, y, vx, vy, w) = (s[0], s[1], s[2], s[3], s[4]);
            let tt = turn_terms(w, t);
            let (sin, cos) = (w * t).sin_cos();
            Ok(DVector::from_vec(vec![
                x + vx * tt.s - vy * tt.c,
                y + vx * tt.c + vy * tt.s,
                vx * cos - vy * sin,
                vx * sin + vy * cos,
                w,
            ]))
        }
    }
}

/// Jacobian of [`transition`] with respect to the state.
pub fn jacobian(kind: MotionKind, s: &DVector<f64>, t: f64) -> Result<DMatrix<f64>, ModelError> {
    kind.check(s)?;
    check_step(t)?;
    match kind {
        MotionKind::Cv | MotionKind::Ca => Ok(linear_transition(kind, t)),
        MotionKind::Ct => {
            let (vx, vy, w) = (s[2], s[3], s[4]);
            let tt = turn_terms(w, t);
            let (sin, cos) = (w * t).sin_cos();
            let mut f = DMatrix::identity(5, 5);
            f[(0, 2)] = tt.s;
            f[(0, 3)] = -tt.c;
            f[(0, 4)] = vx * tt.ds - vy * tt.dc;
            f[(1, 2)] = tt.c;
            f[(1, 3)] = tt.s;
            f[(1, 4)] = vx * tt.dc + vy * tt.ds;
            f[(2, 2)] = cos;
            f[(2, 3)] = -sin;
            f[(2, 4)] = -t * (vx * sin + vy * cos);
            f[(3, 2)] = sin;
            f[(3, 3)] = cos;
            f[(3, 4)] = t * (vx * cos - vy * sin);
            Ok(f)
        }
    }
}

/// Process-noise covariance for one step of length `t`.
pub fn process_noise(kind: MotionKind, t: f64, sig: &NoiseSigmas) -> Result<DMatrix<f64>, ModelError> {
    check_step(t)?;
    sig.validate()?;
    let n = kind.state_dim();
    let mut q = DMatrix::zeros(n, n);
    // Gain vector per axis; state index of each derivative order for x
    // (y is offset by one).
    let (gain, var): (Vec<f64>, f64) = match kind {
        MotionKind::Cv | MotionKind::Ct => (vec![t * t / 2.0, t], sig.acc * sig.acc),
        MotionKind::Ca => (vec![t * t / 2.0, t, 1.0], sig.jerk * sig.jerk),
    };
    for axis in 0..2 {
        for (i, gi) in gain.iter().enumerate() {
            for (j, gj) in gain.iter().enumerate() {
                q[(2 * i + axis, 2 * j + axis)] = var * gi * gj;
            }
        }
    }
    if kind == MotionKind::Ct {
        q[(4, 4)] = sig.omega * sig.omega * t * t;
    }
    Ok(q)
}

/// Position selector `H` for a model: rows `e1`, `e2`.
pub fn measurement_matrix(kind: MotionKind) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(2, kind.state_dim());
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    h
}

/// Position and velocity at one instant, as consumed by
/// [`estimate_process_sigmas`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicSample {
    pub t_ms: i64,
    pub pos: EnuPoint,
    pub vel: EnuPoint,
}

/// Attaches forward-difference velocities to a position track.
///
/// Each sample except the last gets `(p[k+1] - p[k]) / dt`; the last sample
/// is dropped.
pub fn finite_difference_velocities(samples: &[TimedSample<EnuPoint>]) -> Vec<KinematicSample> {
    samples
        .windows(2)
        .filter_map(|w| {
            let dt = (w[1].t_ms - w[0].t_ms) as f64 / 1000.0;
            (dt > 0.0).then(|| KinematicSample {
                t_ms: w[0].t_ms,
                pos: w[0].pos,
                vel: (w[1].pos - w[0].pos) * (1.0 / dt),
            })
        })
        .collect()
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let r = (a + std::f64::consts::PI).rem_euclid(two_pi);
    r - std::f64::consts::PI
}

/// Estimates process-noise sigmas from a ground-truth segment.
///
/// * `acc`: sample std of per-step velocity changes (x and y pooled)
///   divided by the mean step duration.
/// * `jerk`: the same construction one derivative higher, using
///   finite-difference accelerations.
/// * `omega`: sample std of per-step heading-rate estimates.
pub fn estimate_process_sigmas(samples: &[KinematicSample]) -> Result<NoiseSigmas, ModelError> {
    if samples.len() < 3 {
        return Err(ModelError::TooFewSamples {
            needed: 3,
            got: samples.len(),
        });
    }
    let dts: Vec<f64> = samples
        .windows(2)
        .map(|w| (w[1].t_ms - w[0].t_ms) as f64 / 1000.0)
        .collect();
    if let Some(bad) = dts.iter().find(|dt| !(**dt > 0.0)) {
        return Err(ModelError::TimeStep(*bad));
    }
    let mean_dt = dts.iter().sum::<f64>() / dts.len() as f64;

    let dv: Vec<EnuPoint> = samples.windows(2).map(|w| w[1].vel - w[0].vel).collect();
    let pooled = |v: &[EnuPoint]| -> Vec<f64> { v.iter().flat_map(|p| [p.x, p.y]).collect() };
    let acc = sample_std(&pooled(&dv)) / mean_dt;

    let accels: Vec<EnuPoint> = dv.iter().zip(&dts).map(|(d, dt)| *d * (1.0 / dt)).collect();
    let da: Vec<EnuPoint> = accels.windows(2).map(|w| w[1] - w[0]).collect();
    let jerk = if da.is_empty() {
        0.0
    } else {
        sample_std(&pooled(&da)) / mean_dt
    };

    let rates: Vec<f64> = samples
        .windows(2)
        .zip(&dts)
        .filter(|(w, _)| w[0].vel.norm() > 0.0 && w[1].vel.norm() > 0.0)
        .map(|(w, dt)| {
            let h0 = w[0].vel.y.atan2(w[0].vel.x);
            let h1 = w[1].vel.y.atan2(w[1].vel.x);
            wrap_angle(h1 - h0) / dt
        })
        .collect();
    let omega = sample_std(&rates);

    Ok(NoiseSigmas { acc, jerk, omega })
}
