//! Passive TDoA sensing: a forward model producing arrival-time differences
//! for an emitter position, and a Gauss-Newton multilateration solver that
//! inverts it in the plane.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::TimedSample;
use crate::geodesy::{self, EnuPoint, GeoError, GeoPoint};

/// Propagation speed (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const MAX_ITERATIONS: usize = 100;
const STEP_TOLERANCE_M: f64 = 1e-6;
/// Restart points sit this fraction of the way from each sensor to the
/// centroid.
const RESTART_PULL: f64 = 0.25;
const MAX_HALVINGS: usize = 40;
const MIN_SENSOR_SEPARATION_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TdoaError {
    #[error("sensor array needs at least 2 sensors, got {0}")]
    TooFewSensors(usize),
    #[error("reference index {idx} out of range for {len} sensors")]
    Reference { idx: usize, len: usize },
    #[error("sensors {a} and {b} are {dist:.3} m apart (minimum 1 m)")]
    SensorsTooClose { a: usize, b: usize, dist: f64 },
    #[error("measurement references sensor {0}, which is not a valid non-reference sensor")]
    BadDelta(usize),
    #[error("degenerate geometry: range-difference Jacobian has rank < 2")]
    DegenerateGeometry,
    #[error("non-finite initial point")]
    BadInit,
    #[error("sensor position: {0}")]
    Geo(#[from] GeoError),
    #[error("truth trajectory is empty")]
    EmptyTruth,
}

/// Fixed receiver positions with one reference sensor for differencing.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorArray {
    positions: Vec<EnuPoint>,
    reference_idx: usize,
}

impl SensorArray {
    pub fn new(positions: Vec<EnuPoint>, reference_idx: usize) -> Result<Self, TdoaError> {
        if positions.len() < 2 {
            return Err(TdoaError::TooFewSensors(positions.len()));
        }
        if reference_idx >= positions.len() {
            return Err(TdoaError::Reference {
                idx: reference_idx,
                len: positions.len(),
            });
        }
        for a in 0..positions.len() {
            for b in a + 1..positions.len() {
                let dist = positions[a].distance(&positions[b]);
                if !(dist >= MIN_SENSOR_SEPARATION_M) {
                    return Err(TdoaError::SensorsTooClose { a, b, dist });
                }
            }
        }
        Ok(SensorArray {
            positions,
            reference_idx,
        })
    }

    pub fn positions(&self) -> &[EnuPoint] {
        &self.positions
    }

    pub fn reference_idx(&self) -> usize {
        self.reference_idx
    }

    pub fn reference(&self) -> EnuPoint {
        self.positions[self.reference_idx]
    }

    pub fn centroid(&self) -> EnuPoint {
        let n = self.positions.len() as f64;
        self.positions
            .iter()
            .fold(EnuPoint::ORIGIN, |acc, p| acc + *p)
            * (1.0 / n)
    }

    /// Same geometry moved by `offset`.
    pub fn translated(&self, offset: EnuPoint) -> SensorArray {
        SensorArray {
            positions: self.positions.iter().map(|p| *p + offset).collect(),
            reference_idx: self.reference_idx,
        }
    }

    fn others(&self) -> impl Iterator<Item = (usize, EnuPoint)> + '_ {
        self.positions
            .iter()
            .copied()
            .enumerate()
            .filter(move |(i, _)| *i != self.reference_idx)
    }
}

/// Sensor position as written in the array JSON, geodetic or local.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SensorSpec {
    Geo { lat_deg: f64, lon_deg: f64 },
    Local { x: f64, y: f64 },
}

/// `{reference_idx, sensors: [...]}` as stored in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorArraySpec {
    #[serde(default)]
    pub reference_idx: usize,
    pub sensors: Vec<SensorSpec>,
}

impl SensorArraySpec {
    /// Resolves geodetic entries onto the tangent plane at `origin`.
    pub fn resolve(&self, origin: &GeoPoint) -> Result<SensorArray, TdoaError> {
        let positions = self
            .sensors
            .iter()
            .map(|s| match *s {
                SensorSpec::Local { x, y } => Ok(EnuPoint::new(x, y)),
                SensorSpec::Geo { lat_deg, lon_deg } => {
                    geodesy::to_enu(&GeoPoint::new(lat_deg, lon_deg)?, origin)
                }
            })
            .collect::<Result<Vec<_>, GeoError>>()?;
        SensorArray::new(positions, self.reference_idx)
    }
}

/// Arrival-time differences (s) against the reference sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TdoaMeasurement {
    pub t_ms: i64,
    pub deltas: Vec<(usize, f64)>,
}

/// Noiseless range differences `|p - s_i| - |p - s_ref|` for every
/// non-reference sensor.
fn range_differences(arr: &SensorArray, p: &EnuPoint) -> Vec<(usize, f64)> {
    let d_ref = p.distance(&arr.reference());
    arr.others().map(|(i, s)| (i, p.distance(&s) - d_ref)).collect()
}

/// Draws one TDoA measurement with timing noise from `rng`.
pub fn simulate_tdoa_with<R: Rng + ?Sized>(
    arr: &SensorArray,
    p: &EnuPoint,
    sigma_t: f64,
    rng: &mut R,
) -> TdoaMeasurement {
    let noise = Normal::new(0.0, sigma_t.max(0.0)).expect("finite sigma");
    let deltas = range_differences(arr, p)
        .into_iter()
        .map(|(i, dr)| (i, dr / SPEED_OF_LIGHT + noise.sample(rng)))
        .collect();
    TdoaMeasurement { t_ms: 0, deltas }
}

/// One TDoA measurement of an emitter at `p`, reproducible from `seed`.
pub fn simulate_tdoa(arr: &SensorArray, p: &EnuPoint, sigma_t: f64, seed: u64) -> TdoaMeasurement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_tdoa_with(arr, p, sigma_t, &mut rng)
}

/// Result of [`solve_position`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdoaFix {
    pub pos: EnuPoint,
    /// Root-mean-square range-difference residual at `pos` (m).
    pub residual_m: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Range-difference residuals and Jacobian rows in array-local coordinates.
struct Problem {
    refp: Vector2<f64>,
    sensors: Vec<Vector2<f64>>,
    ranges: Vec<f64>,
}

impl Problem {
    fn residuals(&self, p: &Vector2<f64>) -> impl Iterator<Item = f64> + '_ {
        let p = *p;
        let d_ref = (p - self.refp).norm();
        self.sensors
            .iter()
            .zip(&self.ranges)
            .map(move |(s, r)| r - ((p - s).norm() - d_ref))
    }

    fn cost(&self, p: &Vector2<f64>) -> f64 {
        self.residuals(p).map(|r| r * r).sum()
    }

    /// Normal equations `JᵀJ`, `Jᵀr` at `p`.
    fn normal_equations(&self, p: &Vector2<f64>) -> (Matrix2<f64>, Vector2<f64>) {
        let unit = |d: Vector2<f64>| {
            let n = d.norm();
            if n > 0.0 {
                d / n
            } else {
                Vector2::zeros()
            }
        };
        let u_ref = unit(p - self.refp);
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for (s, r) in self.sensors.iter().zip(self.residuals(p)) {
            // d r / d p = -(u_i - u_ref)
            let row = -(unit(p - s) - u_ref);
            jtj += row * row.transpose();
            jtr += row * r;
        }
        (jtj, jtr)
    }
}

/// Outcome of one Gauss-Newton descent in array-local coordinates.
struct Descent {
    p: Vector2<f64>,
    cost: f64,
    iterations: usize,
    converged: bool,
}

impl Problem {
    fn descend(&self, start: Vector2<f64>) -> Result<Descent, TdoaError> {
        let mut p = start;
        let mut cost = self.cost(&p);
        let mut converged = false;
        let mut iterations = 0;
        while iterations < MAX_ITERATIONS {
            iterations += 1;
            let (jtj, jtr) = self.normal_equations(&p);
            let scale = jtj.trace();
            if !(scale > 0.0) || jtj.determinant() <= 1e-12 * scale * scale {
                return Err(TdoaError::DegenerateGeometry);
            }
            let delta = -jtj.try_inverse().ok_or(TdoaError::DegenerateGeometry)? * jtr;
            if delta.norm() < STEP_TOLERANCE_M {
                // The cost change of such a step is at rounding level, so a
                // descent test would accept or reject it arbitrarily.
                p += delta;
                cost = self.cost(&p);
                converged = true;
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let cand = p + delta * alpha;
                let c_cost = self.cost(&cand);
                if c_cost <= cost {
                    accepted = Some((cand, c_cost));
                    break;
                }
                alpha *= 0.5;
            }
            let step = delta.norm() * alpha;
            match accepted {
                Some((cand, c_cost)) => {
                    p = cand;
                    cost = c_cost;
                    if step < STEP_TOLERANCE_M {
                        converged = true;
                        break;
                    }
                }
                None => break,
            }
        }
        Ok(Descent {
            p,
            cost,
            iterations,
            converged,
        })
    }
}

/// Gauss-Newton fit of the emitter position to a TDoA measurement.
///
/// Minimizes `Σ (c Δτ_i - (|p - s_i| - |p - s_ref|))²`, halving steps that
/// do not decrease the cost. A descent stops once a step is shorter than
/// 1 µm or after 100 iterations (`converged = false`).
///
/// The cost has spurious local minima, notably for emitters close to a
/// sensor, so besides `init` the descent is restarted from the array
/// centroid and from a point near each sensor; the lowest-cost result wins,
/// with near-ties going to the earlier start.
pub fn solve_position(
    arr: &SensorArray,
    m: &TdoaMeasurement,
    init: &EnuPoint,
) -> Result<TdoaFix, TdoaError> {
    if !init.is_finite() {
        return Err(TdoaError::BadInit);
    }
    if m.deltas.len() < 2 {
        return Err(TdoaError::DegenerateGeometry);
    }
    // Work relative to the array centroid so the iteration is translation
    // invariant.
    let c = arr.centroid();
    let local = |p: EnuPoint| Vector2::new(p.x - c.x, p.y - c.y);
    let mut sensors = Vec::with_capacity(m.deltas.len());
    let mut ranges = Vec::with_capacity(m.deltas.len());
    for &(i, dt) in &m.deltas {
        if i == arr.reference_idx || i >= arr.positions.len() {
            return Err(TdoaError::BadDelta(i));
        }
        sensors.push(local(arr.positions[i]));
        ranges.push(dt * SPEED_OF_LIGHT);
    }
    let problem = Problem {
        refp: local(arr.reference()),
        sensors,
        ranges,
    };

    let mut starts = vec![local(*init), Vector2::zeros()];
    starts.extend(arr.positions.iter().map(|s| local(*s) * (1.0 - RESTART_PULL)));
    let mut best: Option<Descent> = None;
    let mut first_err = None;
    for start in starts {
        match problem.descend(start) {
            Ok(d) => {
                // Starts that reach the same minimum stop within the step
                // tolerance of it; only a clearly lower cost displaces an
                // earlier start.
                if best.as_ref().is_none_or(|b| d.cost < b.cost * (1.0 - 1e-6) - 1e-12) {
                    best = Some(d);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let best = match (best, first_err) {
        (Some(b), _) => b,
        (None, Some(e)) => return Err(e),
        (None, None) => return Err(TdoaError::DegenerateGeometry),
    };
    let n = problem.ranges.len() as f64;
    Ok(TdoaFix {
        pos: EnuPoint::new(best.p.x + c.x, best.p.y + c.y),
        residual_m: (best.cost / n).sqrt(),
        iterations: best.iterations,
        converged: best.converged,
    })
}

/// Knobs of the synthetic RF sensing chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlightOptions {
    /// Minimum spacing between emitted RF fixes; `None` keeps every epoch.
    pub rf_period_ms: Option<i64>,
    /// Probability that an epoch's fix is replaced by a gross outlier.
    pub outlier_rate: f64,
    /// Outliers are displaced uniformly within a disk of this radius (m).
    pub outlier_max_m: f64,
}

impl Default for FlightOptions {
    fn default() -> Self {
        FlightOptions {
            rf_period_ms: Some(1000),
            outlier_rate: 0.0,
            outlier_max_m: 200.0,
        }
    }
}

/// Simulated RF log with bookkeeping of what went wrong.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlightSim {
    pub rf: Vec<TimedSample<EnuPoint>>,
    /// Epochs dropped because the solver failed.
    pub dropped: usize,
    /// Epochs kept although the solver hit its iteration cap.
    pub unconverged: usize,
    pub outliers: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-epoch seed derived from the run seed and the epoch timestamp.
pub fn epoch_seed(seed: u64, t_ms: i64) -> u64 {
    splitmix64(seed ^ splitmix64(t_ms as u64))
}

/// Picks the epochs at which the RF system reports a fix.
fn decimate(truth: &[TimedSample<EnuPoint>], period_ms: Option<i64>) -> Vec<TimedSample<EnuPoint>> {
    let Some(period) = period_ms.filter(|p| *p > 0) else {
        return truth.to_vec();
    };
    let mut out: Vec<TimedSample<EnuPoint>> = Vec::new();
    for s in truth {
        if out.last().is_none_or(|last| s.t_ms >= last.t_ms + period) {
            out.push(*s);
        }
    }
    out
}

/// Runs the sensing chain over a ground-truth flight: TDoA measurement,
/// then multilateration seeded at the previous fix (array centroid for the
/// first one).
pub fn simulate_flight(
    truth: &[TimedSample<EnuPoint>],
    arr: &SensorArray,
    sigma_t: f64,
    seed: u64,
    opts: &FlightOptions,
) -> Result<FlightSim, TdoaError> {
    if truth.is_empty() {
        return Err(TdoaError::EmptyTruth);
    }
    let mut sim = FlightSim::default();
    let mut init = arr.centroid();
    for s in decimate(truth, opts.rf_period_ms) {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, s.t_ms));
        let mut m = simulate_tdoa_with(arr, &s.pos, sigma_t, &mut rng);
        m.t_ms = s.t_ms;
        let fix = match solve_position(arr, &m, &init) {
            Ok(fix) => fix,
            Err(e) => {
                log::warn!("t={} ms: solver failed: {e}", s.t_ms);
                sim.dropped += 1;
                continue;
            }
        };
        if !fix.converged {
            sim.unconverged += 1;
        }
        init = fix.pos;
        let mut pos = fix.pos;
        if opts.outlier_rate > 0.0 && rng.random::<f64>() < opts.outlier_rate {
            let r = opts.outlier_max_m * rng.random::<f64>().sqrt();
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            pos = pos + EnuPoint::new(r * theta.cos(), r * theta.sin());
            sim.outliers += 1;
        }
        sim.rf.push(TimedSample { t_ms: s.t_ms, pos });
    }
    Ok(sim)
}

/// Root-mean-square position error of an RF log against the truth it was
/// simulated from (matched on identical timestamps).
pub fn position_rmse(truth: &[TimedSample<EnuPoint>], rf: &[TimedSample<EnuPoint>]) -> f64 {
    let mut j = 0;
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in rf {
        while j < truth.len() && truth[j].t_ms < r.t_ms {
            j += 1;
        }
        if j < truth.len() && truth[j].t_ms == r.t_ms {
            sum += truth[j].pos.distance(&r.pos).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Finds the timing noise that gives roughly `target_rmse_m` position RMSE
/// over `truth` with this array (outliers disabled).
///
/// Position error scales close to linearly with timing noise, so a few
/// multiplicative corrections suffice.
pub fn calibrate_sigma_t(
    truth: &[TimedSample<EnuPoint>],
    arr: &SensorArray,
    target_rmse_m: f64,
    seed: u64,
    opts: &FlightOptions,
) -> Result<f64, TdoaError> {
    let opts = FlightOptions {
        outlier_rate: 0.0,
        ..*opts
    };
    let mut sigma = 1e-9;
    for _ in 0..6 {
        let sim = simulate_flight(truth, arr, sigma, seed, &opts)?;
        let rmse = position_rmse(truth, &sim.rf);
        if rmse <= 0.0 {
            break;
        }
        let ratio = target_rmse_m / rmse;
        sigma *= ratio;
        if (ratio - 1.0).abs() < 0.01 {
            break;
        }
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn square(half: f64) -> SensorArray {
        SensorArray::new(
            vec![
                EnuPoint::new(-half, -half),
                EnuPoint::new(half, -half),
                EnuPoint::new(-half, half),
                EnuPoint::new(half, half),
            ],
            0,
        )
        .unwrap()
    }

    #[test]
    fn symmetric_target_has_zero_deltas() {
        let m = simulate_tdoa(&square(50.0), &EnuPoint::ORIGIN, 0.0, 1);
        assert_eq!(m.deltas.len(), 3);
        for (_, d) in m.deltas {
            assert_abs_diff_eq!(d, 0.0, epsilon = 1e-20);
        }
    }

    #[test]
    fn two_sensor_delta() {
        let arr = SensorArray::new(vec![EnuPoint::new(0.0, 0.0), EnuPoint::new(100.0, 0.0)], 0).unwrap();
        let m = simulate_tdoa(&arr, &EnuPoint::ORIGIN, 0.0, 3);
        assert_eq!(m.deltas, vec![(1, 100.0 / SPEED_OF_LIGHT)]);
    }

    #[test]
    fn same_seed_same_measurement() {
        let arr = square(50.0);
        let p = EnuPoint::new(12.0, -30.0);
        assert_eq!(
            simulate_tdoa(&arr, &p, 3e-9, 42),
            simulate_tdoa(&arr, &p, 3e-9, 42)
        );
        assert_ne!(
            simulate_tdoa(&arr, &p, 3e-9, 42),
            simulate_tdoa(&arr, &p, 3e-9, 43)
        );
    }

    #[test]
    fn noiseless_square_fix() {
        let arr = SensorArray::new(
            vec![
                EnuPoint::new(0.0, 0.0),
                EnuPoint::new(100.0, 0.0),
                EnuPoint::new(0.0, 100.0),
                EnuPoint::new(100.0, 100.0),
            ],
            0,
        )
        .unwrap();
        let truth = EnuPoint::new(30.0, 40.0);
        let m = simulate_tdoa(&arr, &truth, 0.0, 0);
        let fix = solve_position(&arr, &m, &arr.centroid()).unwrap();
        assert!(fix.converged);
        assert!(fix.pos.distance(&truth) < 1e-6, "{:?}", fix.pos);
        assert!(fix.residual_m < 1e-6);
    }

    #[test]
    fn two_sensors_is_degenerate() {
        let arr = SensorArray::new(vec![EnuPoint::new(0.0, 0.0), EnuPoint::new(100.0, 0.0)], 0).unwrap();
        let m = simulate_tdoa(&arr, &EnuPoint::new(30.0, 40.0), 0.0, 0);
        assert_eq!(
            solve_position(&arr, &m, &EnuPoint::new(50.0, 10.0)),
            Err(TdoaError::DegenerateGeometry)
        );
    }

    #[test]
    fn array_validation() {
        assert_eq!(
            SensorArray::new(vec![EnuPoint::ORIGIN], 0),
            Err(TdoaError::TooFewSensors(1))
        );
        assert!(matches!(
            SensorArray::new(vec![EnuPoint::ORIGIN, EnuPoint::new(0.5, 0.0)], 0),
            Err(TdoaError::SensorsTooClose { a: 0, b: 1, .. })
        ));
        assert!(matches!(
            SensorArray::new(vec![EnuPoint::ORIGIN, EnuPoint::new(5.0, 0.0)], 2),
            Err(TdoaError::Reference { idx: 2, len: 2 })
        ));
    }

    #[test]
    fn array_spec_accepts_both_forms() {
        let spec: SensorArraySpec = serde_json::from_str(
            r#"{"reference_idx":1,"sensors":[{"x":0,"y":0},{"lat_deg":35.8005,"lon_deg":-78.7},{"x":80,"y":0}]}"#,
        )
        .unwrap();
        let origin = GeoPoint::new(35.8, -78.7).unwrap();
        let arr = spec.resolve(&origin).unwrap();
        assert_eq!(arr.reference_idx(), 1);
        assert_abs_diff_eq!(arr.positions()[1].y, 55.4776, epsilon = 1e-3);
    }

    #[test]
    fn decimation_keeps_one_per_period() {
        let truth: Vec<_> = (0..25)
            .map(|k| TimedSample {
                t_ms: k * 100,
                pos: EnuPoint::ORIGIN,
            })
            .collect();
        let kept = decimate(&truth, Some(1000));
        assert_eq!(
            kept.iter().map(|s| s.t_ms).collect::<Vec<_>>(),
            vec![0, 1000, 2000]
        );
        assert_eq!(decimate(&truth, None).len(), 25);
    }
}
