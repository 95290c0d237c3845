//! Discrete extended Kalman filter run independently on each trajectory
//! segment with the segment's motion model.
//!
//! The update uses the Joseph form and every covariance leaving `predict`
//! or `update` is explicitly symmetrized.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{AlignedPair, Segment, SegmentPlan};
use crate::geodesy::EnuPoint;
use crate::motionmodels::{self, ModelError, MotionKind, NoiseSigmas};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EkfError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("state has length {state} but covariance is {rows}x{cols}")]
    Dimension {
        state: usize,
        rows: usize,
        cols: usize,
    },
    #[error("innovation covariance is singular (R and P both degenerate)")]
    SingularInnovation,
    #[error("segment `{id}` has {got} usable measurements, need at least 2")]
    TooFewPairs { id: String, got: usize },
    #[error("segment `{id}`: no process-noise sigmas configured or estimated")]
    MissingSigmas { id: String },
    #[error("measurement epochs must be strictly increasing ({prev} then {next} ms)")]
    NonIncreasingTime { prev: i64, next: i64 },
    #[error("cannot estimate R from an empty set of pairs")]
    EmptyInput,
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl EkfError {
    /// Segment-level conditions that skip a segment rather than abort a run.
    pub fn is_skip(&self) -> bool {
        matches!(self, EkfError::TooFewPairs { .. })
    }
}

/// Mean and covariance of one model's state at epoch `t_ms`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub s: DVector<f64>,
    pub p: DMatrix<f64>,
    pub t_ms: i64,
}

impl FilterState {
    pub fn position(&self) -> EnuPoint {
        EnuPoint::new(self.s[0], self.s[1])
    }

    fn check(&self) -> Result<(), EkfError> {
        let n = self.s.len();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(EkfError::Dimension {
                state: n,
                rows: self.p.nrows(),
                cols: self.p.ncols(),
            });
        }
        Ok(())
    }
}

/// Position measurement model `z = H s + v`, `v ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub h: DMatrix<f64>,
    pub r: Matrix2<f64>,
}

impl MeasurementModel {
    pub fn position(kind: MotionKind, r: Matrix2<f64>) -> Self {
        MeasurementModel {
            h: motionmodels::measurement_matrix(kind),
            r,
        }
    }
}

fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

/// Time update: `s⁻ = f(s)`, `P⁻ = F P Fᵀ + Q`.
pub fn predict(
    fs: &FilterState,
    kind: MotionKind,
    t: f64,
    q: &DMatrix<f64>,
) -> Result<FilterState, EkfError> {
    fs.check()?;
    let n = kind.state_dim();
    if q.nrows() != n || q.ncols() != n {
        return Err(EkfError::Dimension {
            state: n,
            rows: q.nrows(),
            cols: q.ncols(),
        });
    }
    let f = motionmodels::jacobian(kind, &fs.s, t)?;
    let s = motionmodels::transition(kind, &fs.s, t)?;
    let p = &f * &fs.p * f.transpose() + q;
    Ok(FilterState {
        s,
        p: symmetrize(&p),
        t_ms: fs.t_ms + (t * 1000.0).round() as i64,
    })
}

/// Measurement update with the Joseph-form covariance.
pub fn update(
    fs: &FilterState,
    z: &EnuPoint,
    meas: &MeasurementModel,
) -> Result<FilterState, EkfError> {
    fs.check()?;
    let n = fs.s.len();
    if meas.h.ncols() != n || meas.h.nrows() != 2 {
        return Err(EkfError::Dimension {
            state: n,
            rows: meas.h.nrows(),
            cols: meas.h.ncols(),
        });
    }
    let h = &meas.h;
    let r = DMatrix::from_column_slice(2, 2, meas.r.as_slice());
    let s = h * &fs.p * h.transpose() + &r;
    let s_inv = Matrix2::new(s[(0, 0)], s[(0, 1)], s[(1, 0)], s[(1, 1)])
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or(EkfError::SingularInnovation)?;
    let s_inv = DMatrix::from_column_slice(2, 2, s_inv.as_slice());
    let k = &fs.p * h.transpose() * s_inv;
    let innovation = DVector::from_vec(vec![z.x, z.y]) - h * &fs.s;
    let state = &fs.s + &k * innovation;
    let i_kh = DMatrix::identity(n, n) - &k * h;
    let p = &i_kh * &fs.p * i_kh.transpose() + &k * r * k.transpose();
    Ok(FilterState {
        s: state,
        p: symmetrize(&p),
        t_ms: fs.t_ms,
    })
}

/// Position-only normalized estimation error squared against a truth point.
pub fn position_nees(fs: &FilterState, truth: &EnuPoint) -> Option<f64> {
    let e = Vector2::new(truth.x - fs.s[0], truth.y - fs.s[1]);
    let p = Matrix2::new(fs.p[(0, 0)], fs.p[(0, 1)], fs.p[(1, 0)], fs.p[(1, 1)]);
    p.try_inverse().map(|pi| (e.transpose() * pi * e)[0])
}

/// How `R` is derived from the RF errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RMode {
    /// `diag(m, m)` with `m` the mean Euclidean error in metres.
    #[default]
    Mean,
    /// `diag(mean dx², mean dy²)`.
    Mse,
}

impl std::str::FromStr for RMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(RMode::Mean),
            "mse" => Ok(RMode::Mse),
            other => Err(format!("unknown R mode `{other}` (expected mean or mse)")),
        }
    }
}

/// Measurement covariance from truth/RF pairs.
pub fn estimate_r(pairs: &[AlignedPair], mode: RMode) -> Result<Matrix2<f64>, EkfError> {
    if pairs.is_empty() {
        return Err(EkfError::EmptyInput);
    }
    let n = pairs.len() as f64;
    Ok(match mode {
        RMode::Mean => {
            let m = pairs.iter().map(AlignedPair::error).sum::<f64>() / n;
            Matrix2::new(m, 0.0, 0.0, m)
        }
        RMode::Mse => {
            let (sx, sy) = pairs.iter().fold((0.0, 0.0), |(sx, sy), p| {
                let d = p.rf - p.uav;
                (sx + d.x * d.x, sy + d.y * d.y)
            });
            Matrix2::new(sx / n, 0.0, 0.0, sy / n)
        }
    })
}

/// Filter settings shared by every segment of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub r: Matrix2<f64>,
    /// Initial velocity standard deviation (m/s).
    pub v_max: f64,
    /// Initial acceleration variance, (m/s²)².
    pub init_acc_var: f64,
    /// Initial turn-rate variance, (rad/s)².
    pub init_omega_var: f64,
    /// Used when a segment carries no sigmas of its own.
    pub default_sigmas: Option<NoiseSigmas>,
}

impl FilterConfig {
    pub fn new(r: Matrix2<f64>) -> Self {
        FilterConfig {
            r,
            v_max: 20.0,
            init_acc_var: 25.0,
            init_omega_var: 0.1,
            default_sigmas: None,
        }
    }

    /// State at the first measurement of a segment: position from the
    /// measurement, every derivative zero.
    pub fn initial_state(&self, kind: MotionKind, z: &EnuPoint, t_ms: i64) -> FilterState {
        let n = kind.state_dim();
        let mut s = DVector::zeros(n);
        s[0] = z.x;
        s[1] = z.y;
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (2, 2)).copy_from(&self.r);
        let v2 = self.v_max * self.v_max;
        p[(2, 2)] = v2;
        p[(3, 3)] = v2;
        match kind {
            MotionKind::Cv => {}
            MotionKind::Ca => {
                p[(4, 4)] = self.init_acc_var;
                p[(5, 5)] = self.init_acc_var;
            }
            MotionKind::Ct => p[(4, 4)] = self.init_omega_var,
        }
        FilterState { s, p, t_ms }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackEntry {
    pub idx: usize,
    pub t_ms: i64,
    pub pos: EnuPoint,
    pub state: FilterState,
}

/// Filtered output of one segment, one entry per measurement epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub segment_id: String,
    pub entries: Vec<TrackEntry>,
}

/// Filters the measurements of one segment.
///
/// Pairs outside the segment's index range are ignored. Fewer than two
/// usable pairs yields [`EkfError::TooFewPairs`], which callers treat as a
/// skip.
pub fn run_segment(
    seg: &Segment,
    pairs: &[AlignedPair],
    cfg: &FilterConfig,
) -> Result<Track, EkfError> {
    let data: Vec<&AlignedPair> = pairs.iter().filter(|p| seg.contains(p.idx)).collect();
    if data.len() < 2 {
        return Err(EkfError::TooFewPairs {
            id: seg.id.clone(),
            got: data.len(),
        });
    }
    let sigmas = seg
        .sigmas
        .or(cfg.default_sigmas)
        .ok_or_else(|| EkfError::MissingSigmas { id: seg.id.clone() })?;
    let meas = MeasurementModel::position(seg.mm, cfg.r);

    let first = data[0];
    let mut fs = cfg.initial_state(seg.mm, &first.rf, first.t_ms);
    let mut entries = Vec::with_capacity(data.len());
    entries.push(TrackEntry {
        idx: first.idx,
        t_ms: first.t_ms,
        pos: fs.position(),
        state: fs.clone(),
    });
    for pair in &data[1..] {
        if pair.t_ms <= fs.t_ms {
            return Err(EkfError::NonIncreasingTime {
                prev: fs.t_ms,
                next: pair.t_ms,
            });
        }
        let t = (pair.t_ms - fs.t_ms) as f64 / 1000.0;
        let q = motionmodels::process_noise(seg.mm, t, &sigmas)?;
        let mut pred = predict(&fs, seg.mm, t, &q)?;
        pred.t_ms = pair.t_ms;
        fs = update(&pred, &pair.rf, &meas)?;
        entries.push(TrackEntry {
            idx: pair.idx,
            t_ms: pair.t_ms,
            pos: fs.position(),
            state: fs.clone(),
        });
    }
    Ok(Track {
        segment_id: seg.id.clone(),
        entries,
    })
}

/// Per-segment results of a whole-trajectory run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRun {
    pub tracks: Vec<(Segment, Track)>,
    /// Segments that produced no track, with the reason.
    pub failures: Vec<(String, EkfError)>,
}

/// Runs every segment of `plan` independently.
///
/// `threads > 1` filters segments on a dedicated pool; output order always
/// follows the plan.
pub fn run_trajectory(
    plan: &SegmentPlan,
    pairs: &[AlignedPair],
    cfg: &FilterConfig,
    threads: usize,
) -> Result<TrajectoryRun, EkfError> {
    let job = |seg: &Segment| (seg.clone(), run_segment(seg, pairs, cfg));
    let results: Vec<(Segment, Result<Track, EkfError>)> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| EkfError::ThreadPool(e.to_string()))?;
        pool.install(|| plan.segments.par_iter().map(job).collect())
    } else {
        plan.segments.iter().map(job).collect()
    };
    let mut run = TrajectoryRun::default();
    for (seg, res) in results {
        match res {
            Ok(track) => run.tracks.push((seg, track)),
            Err(e) => run.failures.push((seg.id.clone(), e)),
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cv_state(s: [f64; 4], p: DMatrix<f64>) -> FilterState {
        FilterState {
            s: DVector::from_column_slice(&s),
            p,
            t_ms: 0,
        }
    }

    #[test]
    fn predict_cv_unit_covariance() {
        let fs = cv_state([0.0, 0.0, 1.0, 0.0], DMatrix::identity(4, 4));
        let out = predict(&fs, MotionKind::Cv, 1.0, &DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(out.s.as_slice(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(out.p[(0, 0)], 2.0);
        assert_eq!(out.p[(0, 2)], 1.0);
        assert_eq!(out.t_ms, 1000);
    }

    #[test]
    fn predict_deterministic_without_noise() {
        let fs = cv_state([1.0, 2.0, 3.0, 4.0], DMatrix::zeros(4, 4));
        let out = predict(&fs, MotionKind::Cv, 2.5, &DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(out.p, DMatrix::zeros(4, 4));
    }

    #[test]
    fn predict_rejects_wrong_q() {
        let fs = cv_state([0.0; 4], DMatrix::identity(4, 4));
        assert!(matches!(
            predict(&fs, MotionKind::Cv, 1.0, &DMatrix::zeros(5, 5)),
            Err(EkfError::Dimension { .. })
        ));
        assert!(matches!(
            predict(&fs, MotionKind::Ca, 1.0, &DMatrix::zeros(6, 6)),
            Err(EkfError::Model(ModelError::Dimension { .. }))
        ));
    }

    #[test]
    fn update_half_gain() {
        let fs = cv_state([1.0, 1.0, 0.0, 0.0], DMatrix::identity(4, 4));
        let meas = MeasurementModel::position(MotionKind::Cv, Matrix2::identity());
        let out = update(&fs, &EnuPoint::new(3.0, 3.0), &meas).unwrap();
        assert_abs_diff_eq!(out.s[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.s[1], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.p[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn update_untrusted_measurement() {
        let fs = cv_state([1.0, -1.0, 0.5, 0.0], DMatrix::identity(4, 4));
        let meas = MeasurementModel::position(MotionKind::Cv, Matrix2::identity() * 1e12);
        let out = update(&fs, &EnuPoint::new(100.0, 50.0), &meas).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(out.s[i], fs.s[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn update_exact_measurement() {
        let fs = cv_state([1.0, -1.0, 0.5, 0.0], DMatrix::identity(4, 4));
        let meas = MeasurementModel::position(MotionKind::Cv, Matrix2::zeros());
        let out = update(&fs, &EnuPoint::new(7.0, 9.0), &meas).unwrap();
        assert_eq!(out.s[0], 7.0);
        assert_eq!(out.s[1], 9.0);
    }

    #[test]
    fn update_singular_innovation() {
        let fs = cv_state([0.0; 4], DMatrix::zeros(4, 4));
        let meas = MeasurementModel::position(MotionKind::Cv, Matrix2::zeros());
        assert_eq!(
            update(&fs, &EnuPoint::new(1.0, 1.0), &meas),
            Err(EkfError::SingularInnovation)
        );
    }

    fn pair(idx: usize, t_ms: i64, uav: (f64, f64), rf: (f64, f64)) -> AlignedPair {
        AlignedPair {
            idx,
            t_ms,
            uav: EnuPoint::new(uav.0, uav.1),
            rf: EnuPoint::new(rf.0, rf.1),
        }
    }

    #[test]
    fn estimate_r_modes() {
        let same = [pair(0, 0, (1.0, 1.0), (1.0, 1.0)), pair(1, 1, (2.0, 2.0), (2.0, 2.0))];
        assert_eq!(estimate_r(&same, RMode::Mean).unwrap(), Matrix2::zeros());

        let errs = [
            pair(0, 0, (0.0, 0.0), (3.0, 0.0)),
            pair(1, 1, (0.0, 0.0), (0.0, 4.0)),
            pair(2, 2, (0.0, 0.0), (3.0, 4.0)),
        ];
        assert_eq!(estimate_r(&errs, RMode::Mean).unwrap(), Matrix2::new(4.0, 0.0, 0.0, 4.0));

        let offsets = [
            pair(0, 0, (0.0, 0.0), (3.0, -4.0)),
            pair(1, 1, (10.0, 5.0), (13.0, 1.0)),
        ];
        assert_eq!(estimate_r(&offsets, RMode::Mse).unwrap(), Matrix2::new(9.0, 0.0, 0.0, 16.0));
        assert_eq!(estimate_r(&[], RMode::Mse), Err(EkfError::EmptyInput));
    }

    fn seg(id: &str, start: usize, end: usize, mm: MotionKind, acc: f64) -> Segment {
        Segment {
            id: id.into(),
            start_idx: start,
            end_idx: end,
            mm,
            sigmas: Some(NoiseSigmas {
                acc,
                jerk: acc,
                omega: 0.01,
            }),
        }
    }

    #[test]
    fn single_pair_segment_is_skipped() {
        let pairs = [pair(0, 0, (0.0, 0.0), (1.0, 1.0))];
        let cfg = FilterConfig::new(Matrix2::identity());
        let err = run_segment(&seg("S1", 0, 0, MotionKind::Cv, 0.1), &pairs, &cfg).unwrap_err();
        assert!(err.is_skip());
    }

    #[test]
    fn missing_sigmas_is_an_error() {
        let pairs = [pair(0, 0, (0.0, 0.0), (1.0, 1.0)), pair(1, 1000, (0.0, 0.0), (1.0, 1.0))];
        let cfg = FilterConfig::new(Matrix2::identity());
        let mut s = seg("S1", 0, 1, MotionKind::Cv, 0.1);
        s.sigmas = None;
        assert!(matches!(
            run_segment(&s, &pairs, &cfg),
            Err(EkfError::MissingSigmas { .. })
        ));
    }

    #[test]
    fn constant_measurement_converges() {
        let pairs: Vec<_> = (0..51)
            .map(|k| pair(k, k as i64 * 1000, (5.0, 5.0), (5.0, 5.0)))
            .collect();
        let cfg = FilterConfig::new(Matrix2::new(25.0, 0.0, 0.0, 25.0));
        let track = run_segment(&seg("S1", 0, 50, MotionKind::Cv, 0.1), &pairs, &cfg).unwrap();
        assert_eq!(track.entries.len(), 51);
        let last = track.entries.last().unwrap().pos;
        assert!(last.distance(&EnuPoint::new(5.0, 5.0)) < 0.01);
    }

    #[test]
    fn noiseless_cv_flight_is_reproduced() {
        let truth = |k: usize| (10.0 + 3.0 * k as f64, -2.0 + 1.5 * k as f64);
        let pairs: Vec<_> = (0..30)
            .map(|k| pair(k, k as i64 * 1000, truth(k), truth(k)))
            .collect();
        // tiny R keeps the innovation covariance invertible once P collapses
        let cfg = FilterConfig::new(Matrix2::identity() * 1e-6);
        let track = run_segment(&seg("S1", 0, 29, MotionKind::Cv, 0.0), &pairs, &cfg).unwrap();
        for (e, p) in track.entries.iter().zip(&pairs) {
            assert!(e.pos.distance(&p.uav) < 1e-6);
        }
    }

    #[test]
    fn trajectory_collects_skips() {
        let pairs: Vec<_> = (0..10)
            .map(|k| pair(k, k as i64 * 1000, (k as f64, 0.0), (k as f64, 0.5)))
            .collect();
        let plan = SegmentPlan::new(
            vec![
                seg("S1", 0, 5, MotionKind::Cv, 0.1),
                seg("S2", 7, 7, MotionKind::Ct, 0.1),
            ],
            10,
        )
        .unwrap();
        let cfg = FilterConfig::new(Matrix2::identity());
        let run = run_trajectory(&plan, &pairs, &cfg, 1).unwrap();
        assert_eq!(run.tracks.len(), 1);
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.failures[0].0, "S2");
    }
}
