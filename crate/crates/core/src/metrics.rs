//! Error statistics, empirical CDFs and per-segment comparison tables.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::dataio::{Segment, TimedSample};
use crate::geodesy::EnuPoint;
use crate::motionmodels::MotionKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {truth} truth positions vs {est} estimates")]
    LengthMismatch { truth: usize, est: usize },
    #[error("statistics of an empty error sequence")]
    Empty,
}

/// Per-epoch Euclidean distance between truth and estimate.
pub fn euclidean_errors(truth: &[EnuPoint], est: &[EnuPoint]) -> Result<Vec<f64>, MetricsError> {
    if truth.len() != est.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            est: est.len(),
        });
    }
    Ok(truth.iter().zip(est).map(|(a, b)| a.distance(b)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorStats {
    pub min_m: f64,
    pub max_m: f64,
    pub mean_m: f64,
    /// Sample standard deviation (n - 1 denominator, 0 for a single value).
    pub std_m: f64,
    pub n: usize,
}

impl ErrorStats {
    pub fn get(&self, stat: Stat) -> f64 {
        match stat {
            Stat::Min => self.min_m,
            Stat::Max => self.max_m,
            Stat::Mean => self.mean_m,
            Stat::Std => self.std_m,
        }
    }
}

pub fn stats(errors: &[f64]) -> Result<ErrorStats, MetricsError> {
    let n = errors.len();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let min_m = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let max_m = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean_m = errors.iter().sum::<f64>() / n as f64;
    let std_m = if n > 1 {
        let ss: f64 = errors.iter().map(|e| (e - mean_m).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    // summation order can push the mean a hair outside [min, max]
    let mean_m = mean_m.clamp(min_m, max_m);
    Ok(ErrorStats {
        min_m,
        max_m,
        mean_m,
        std_m,
        n,
    })
}

/// Empirical CDF sampled at each distinct error value.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfCurve {
    /// `(error_m, fraction of errors <= error_m)`, strictly increasing in
    /// both coordinates, last fraction exactly 1.
    pub points: Vec<(f64, f64)>,
}

pub fn cdf(errors: &[f64]) -> Result<CdfCurve, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (i, e) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n as f64;
        match points.last_mut() {
            Some(last) if last.0 == *e => last.1 = frac,
            _ => points.push((*e, frac)),
        }
    }
    Ok(CdfCurve { points })
}

impl CdfCurve {
    /// `error_m,fraction` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("error_m,fraction\n");
        for (e, f) in &self.points {
            let _ = writeln!(out, "{e},{f}");
        }
        out
    }
}

/// Smallest error `e` with `F(e) >= q`. `q` is clamped into `(0, 1]`, so
/// `q <= 0` yields the minimum error.
pub fn quantile(curve: &CdfCurve, q: f64) -> f64 {
    let q = q.min(1.0);
    curve
        .points
        .iter()
        .find(|(_, f)| *f >= q - 1e-12)
        .or(curve.points.last())
        .map(|(e, _)| *e)
        .unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stat {
    Min,
    Max,
    Mean,
    Std,
}

impl Stat {
    pub const ALL: [Stat; 4] = [Stat::Min, Stat::Max, Stat::Mean, Stat::Std];

    pub fn label(self) -> &'static str {
        match self {
            Stat::Min => "min",
            Stat::Max => "max",
            Stat::Mean => "mean",
            Stat::Std => "std",
        }
    }

    fn table_label(self) -> &'static str {
        match self {
            Stat::Min => "min. (m)",
            Stat::Max => "max. (m)",
            Stat::Mean => "mean (m)",
            Stat::Std => "std (m)",
        }
    }
}

/// Which estimator has the lower value of a statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Better {
    Rf,
    Ekf,
    Tie,
}

impl Better {
    pub fn label(self) -> &'static str {
        match self {
            Better::Rf => "rf",
            Better::Ekf => "ekf",
            Better::Tie => "tie",
        }
    }
}

/// RF and EKF errors of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentErrors {
    pub id: String,
    pub mm: MotionKind,
    pub rf: Vec<f64>,
    pub ekf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentRow {
    pub id: String,
    pub mm: MotionKind,
    pub rf: ErrorStats,
    pub ekf: ErrorStats,
}

impl SegmentRow {
    pub fn better(&self, stat: Stat) -> Better {
        let (r, e) = (self.rf.get(stat), self.ekf.get(stat));
        if e < r {
            Better::Ekf
        } else if r < e {
            Better::Rf
        } else {
            Better::Tie
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentReport {
    pub rows: Vec<SegmentRow>,
    /// Segments left out because one of their error sequences was empty.
    pub omitted: Vec<String>,
}

pub const REPORT_HEADER: &str = "segment,mm,stat,rf_m,ekf_m,better";

/// Builds the per-segment RF vs EKF comparison.
pub fn segment_report(segments: &[SegmentErrors]) -> SegmentReport {
    let mut report = SegmentReport::default();
    for seg in segments {
        match (stats(&seg.rf), stats(&seg.ekf)) {
            (Ok(rf), Ok(ekf)) => report.rows.push(SegmentRow {
                id: seg.id.clone(),
                mm: seg.mm,
                rf,
                ekf,
            }),
            _ => {
                log::warn!("segment `{}` has no data; omitted from the report", seg.id);
                report.omitted.push(seg.id.clone());
            }
        }
    }
    report
}

impl SegmentReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for row in &self.rows {
            for stat in Stat::ALL {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    row.id,
                    row.mm,
                    stat.label(),
                    row.rf.get(stat),
                    row.ekf.get(stat),
                    row.better(stat).label()
                );
            }
        }
        out
    }

    /// Fixed-width table: one RF and one EKF column per segment, one line
    /// per statistic, the strictly lower value of each pair marked `*`.
    pub fn to_text(&self) -> String {
        const W: usize = 9;
        let mut out = format!("{:<12}", "Err. stats.");
        for row in &self.rows {
            let _ = write!(out, "|{:>W$}|{:>W$}", format!("{} RF", row.id), format!("{} EKF", row.id));
        }
        out.push('\n');
        for stat in Stat::ALL {
            let _ = write!(out, "{:<12}", stat.table_label());
            for row in &self.rows {
                let better = row.better(stat);
                let cell = |v: f64, mark: bool| {
                    if mark {
                        format!("*{v:.2}")
                    } else {
                        format!("{v:.2}")
                    }
                };
                let _ = write!(
                    out,
                    "|{:>W$}|{:>W$}",
                    cell(row.rf.get(stat), better == Better::Rf),
                    cell(row.ekf.get(stat), better == Better::Ekf)
                );
            }
            out.push('\n');
        }
        out
    }
}

/// Speed (and, for CA segments, acceleration magnitude) summary of one
/// segment's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VelocityStats {
    pub id: String,
    pub mm: MotionKind,
    pub speed_mean: f64,
    pub speed_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accel_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accel_std: Option<f64>,
}

/// Finite-difference speed profile per segment.
///
/// Segment indices address `truth` directly. Segments with fewer than two
/// samples are omitted and their ids returned alongside.
pub fn velocity_profile(
    truth: &[TimedSample<EnuPoint>],
    segments: &[Segment],
) -> (Vec<VelocityStats>, Vec<String>) {
    let mut out = Vec::new();
    let mut omitted = Vec::new();
    for seg in segments {
        let end = seg.end_idx.min(truth.len().saturating_sub(1));
        let slice = if seg.start_idx <= end && seg.start_idx < truth.len() {
            &truth[seg.start_idx..=end]
        } else {
            &[][..]
        };
        // (midpoint time in s, velocity)
        let vels: Vec<(f64, EnuPoint)> = slice
            .windows(2)
            .filter_map(|w| {
                let dt = (w[1].t_ms - w[0].t_ms) as f64 / 1000.0;
                (dt > 0.0).then(|| {
                    let mid = (w[0].t_ms + w[1].t_ms) as f64 / 2000.0;
                    (mid, (w[1].pos - w[0].pos) * (1.0 / dt))
                })
            })
            .collect();
        let speeds: Vec<f64> = vels.iter().map(|(_, v)| v.norm()).collect();
        let Ok(speed) = stats(&speeds) else {
            log::warn!("segment `{}` has fewer than two samples; no velocity profile", seg.id);
            omitted.push(seg.id.clone());
            continue;
        };
        let (mut accel_mean, mut accel_std) = (None, None);
        if seg.mm == MotionKind::Ca {
            let accels: Vec<f64> = vels
                .windows(2)
                .map(|w| (w[1].1 - w[0].1).norm() / (w[1].0 - w[0].0))
                .collect();
            if let Ok(a) = stats(&accels) {
                accel_mean = Some(a.mean_m);
                accel_std = Some(a.std_m);
            }
        }
        out.push(VelocityStats {
            id: seg.id.clone(),
            mm: seg.mm,
            speed_mean: speed.mean_m,
            speed_std: speed.std_m,
            accel_mean,
            accel_std,
        });
    }
    (out, omitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn three_four_five() {
        let e = euclidean_errors(&[EnuPoint::new(0.0, 0.0)], &[EnuPoint::new(3.0, 4.0)]).unwrap();
        assert_eq!(e, vec![5.0]);
        let e = euclidean_errors(&[EnuPoint::new(1.0, 1.0)], &[EnuPoint::new(2.0, 2.0)]).unwrap();
        assert_eq!(e, vec![2f64.sqrt()]);
        assert!(euclidean_errors(&[EnuPoint::ORIGIN], &[]).is_err());
    }

    #[test]
    fn stats_cases() {
        let s = stats(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((s.min_m, s.max_m, s.mean_m, s.std_m), (5.0, 5.0, 5.0, 0.0));
        let s = stats(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean_m, 2.5);
        assert_abs_diff_eq!(s.std_m, (5.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        let s = stats(&[7.0]).unwrap();
        assert_eq!((s.min_m, s.max_m, s.mean_m, s.std_m, s.n), (7.0, 7.0, 7.0, 0.0, 1));
        assert_eq!(stats(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn cdf_cases() {
        let c = cdf(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(c.points[1], (2.0, 2.0 / 3.0));
        assert_eq!(c.points.last().unwrap().1, 1.0);
        let c = cdf(&[4.0, 4.0, 4.0]).unwrap();
        assert_eq!(c.points, vec![(4.0, 1.0)]);
        assert!(cdf(&[]).is_err());
    }

    #[test]
    fn quantile_cases() {
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        let c = cdf(&ten).unwrap();
        assert_eq!(quantile(&c, 0.9), 9.0);
        assert_eq!(quantile(&c, 1.0), 10.0);
        assert_eq!(quantile(&c, 0.1), 1.0);
        let c = cdf(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(quantile(&c, 0.5), 2.0);
        assert_eq!(quantile(&c, 1.0 / 3.0), 1.0);
    }

    fn seg_errors(rf: Vec<f64>, ekf: Vec<f64>) -> SegmentErrors {
        SegmentErrors {
            id: "S1".into(),
            mm: MotionKind::Cv,
            rf,
            ekf,
        }
    }

    #[test]
    fn identical_errors_have_no_winner() {
        let e = vec![1.0, 4.0, 2.5];
        let r = segment_report(&[seg_errors(e.clone(), e)]);
        for stat in Stat::ALL {
            assert_eq!(r.rows[0].better(stat), Better::Tie);
        }
    }

    #[test]
    fn halved_errors_favor_ekf() {
        let rf = vec![1.0, 4.0, 2.5, 8.0];
        let ekf = rf.iter().map(|e| e / 2.0).collect();
        let r = segment_report(&[seg_errors(rf, ekf)]);
        for stat in Stat::ALL {
            assert_eq!(r.rows[0].better(stat), Better::Ekf);
        }
    }

    #[test]
    fn empty_segment_is_omitted() {
        let r = segment_report(&[seg_errors(vec![], vec![])]);
        assert!(r.rows.is_empty());
        assert_eq!(r.omitted, vec!["S1".to_string()]);
    }

    fn line(points: &[(f64, f64)], t0: i64, dt: i64) -> Vec<TimedSample<EnuPoint>> {
        points
            .iter()
            .enumerate()
            .map(|(k, (x, y))| TimedSample {
                t_ms: t0 + k as i64 * dt,
                pos: EnuPoint::new(*x, *y),
            })
            .collect()
    }

    fn segment(mm: MotionKind, start: usize, end: usize) -> Segment {
        Segment {
            id: "S".into(),
            start_idx: start,
            end_idx: end,
            mm,
            sigmas: None,
        }
    }

    #[test]
    fn uniform_speed_profile() {
        let pts: Vec<_> = (0..20).map(|k| (3.0 * k as f64, 0.0)).collect();
        let (v, omitted) = velocity_profile(&line(&pts, 0, 1000), &[segment(MotionKind::Cv, 0, 19)]);
        assert!(omitted.is_empty());
        assert_abs_diff_eq!(v[0].speed_mean, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[0].speed_std, 0.0, epsilon = 1e-12);
        assert!(v[0].accel_mean.is_none());
    }

    #[test]
    fn two_sample_speed() {
        let (v, _) = velocity_profile(
            &line(&[(0.0, 0.0), (6.0, 8.0)], 0, 2000),
            &[segment(MotionKind::Cv, 0, 1)],
        );
        assert_eq!(v[0].speed_mean, 5.0);
    }

    #[test]
    fn constant_acceleration_profile() {
        let pts: Vec<_> = (0..=10).map(|k| (0.5 * (k * k) as f64, 0.0)).collect();
        let (v, _) = velocity_profile(&line(&pts, 0, 1000), &[segment(MotionKind::Ca, 0, 10)]);
        let a = v[0].accel_mean.unwrap();
        assert!((a - 1.0).abs() < 0.05, "{a}");
    }

    #[test]
    fn single_sample_segment_is_omitted() {
        let (v, omitted) = velocity_profile(&line(&[(0.0, 0.0)], 0, 1000), &[segment(MotionKind::Cv, 0, 0)]);
        assert!(v.is_empty());
        assert_eq!(omitted.len(), 1);
    }
}
