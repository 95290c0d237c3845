use proptest::prelude::*;
use rftrack::dataio::TimedSample;
use rftrack::tdoa::{self, FlightOptions, SensorArray, TdoaError, TdoaMeasurement};
use rftrack::EnuPoint;

const C: f64 = 299_792_458.0;

fn array(offset: EnuPoint) -> SensorArray {
    SensorArray::new(
        vec![
            EnuPoint::new(0.0, 0.0) + offset,
            EnuPoint::new(100.0, 0.0) + offset,
            EnuPoint::new(100.0, 100.0) + offset,
            EnuPoint::new(0.0, 100.0) + offset,
        ],
        0,
    )
    .unwrap()
}

fn cost(arr: &SensorArray, m: &TdoaMeasurement, p: &EnuPoint) -> f64 {
    let d_ref = p.distance(&arr.reference());
    m.deltas
        .iter()
        .map(|&(i, dt)| (C * dt - (p.distance(&arr.positions()[i]) - d_ref)).powi(2))
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn solution_is_translation_equivariant(
        x in 0.0f64..100.0,
        y in 0.0f64..100.0,
        dx in -5000.0f64..5000.0,
        dy in -5000.0f64..5000.0,
        seed in any::<u64>(),
    ) {
        let shift = EnuPoint::new(dx, dy);
        let base = array(EnuPoint::ORIGIN);
        let moved = array(shift);
        let p = EnuPoint::new(x, y);
        let m = tdoa::simulate_tdoa(&base, &p, 3.3e-9, seed);
        let a = tdoa::solve_position(&base, &m, &base.centroid()).unwrap();
        let b = tdoa::solve_position(&moved, &m, &moved.centroid()).unwrap();
        prop_assert!((b.pos - shift).distance(&a.pos) < 1e-9, "{:?} vs {:?}", a.pos, b.pos);
    }

    #[test]
    fn solver_never_ends_above_its_start(
        x in -50.0f64..150.0,
        y in -50.0f64..150.0,
        ix in -200.0f64..300.0,
        iy in -200.0f64..300.0,
        seed in any::<u64>(),
    ) {
        let arr = array(EnuPoint::ORIGIN);
        let m = tdoa::simulate_tdoa(&arr, &EnuPoint::new(x, y), 10e-9, seed);
        let init = EnuPoint::new(ix, iy);
        if let Ok(fix) = tdoa::solve_position(&arr, &m, &init) {
            prop_assert!(cost(&arr, &m, &fix.pos) <= cost(&arr, &m, &init));
            let n = m.deltas.len() as f64;
            prop_assert!((fix.residual_m - (cost(&arr, &m, &fix.pos) / n).sqrt()).abs() < 1e-9);
        }
    }
}

#[test]
fn error_grows_with_timing_noise() {
    let arr = array(EnuPoint::ORIGIN);
    let targets: Vec<EnuPoint> = (0..500)
        .map(|k| EnuPoint::new(5.0 + (k * 37 % 90) as f64, 5.0 + (k * 53 % 90) as f64))
        .collect();
    let rmse: Vec<f64> = [0.0, 1e-9, 3e-9, 10e-9]
        .iter()
        .map(|&sigma| {
            let sum: f64 = targets
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let m = tdoa::simulate_tdoa(&arr, p, sigma, k as u64);
                    let fix = tdoa::solve_position(&arr, &m, &arr.centroid()).unwrap();
                    fix.pos.distance(p).powi(2)
                })
                .sum();
            (sum / targets.len() as f64).sqrt()
        })
        .collect();
    assert!(rmse.windows(2).all(|w| w[0] <= w[1]), "{rmse:?}");
    assert!(rmse[0] < 1e-6);
}

#[test]
fn collinear_sensors_are_degenerate() {
    let arr = SensorArray::new(
        vec![EnuPoint::new(0.0, 0.0), EnuPoint::new(50.0, 0.0), EnuPoint::new(100.0, 0.0)],
        0,
    )
    .unwrap();
    let m = tdoa::simulate_tdoa(&arr, &EnuPoint::new(30.0, 40.0), 0.0, 0);
    assert!(matches!(
        tdoa::solve_position(&arr, &m, &arr.centroid()),
        Err(TdoaError::DegenerateGeometry)
    ));
}

fn circle_flight() -> Vec<TimedSample<EnuPoint>> {
    (0..300)
        .map(|k| {
            let a = k as f64 * 0.01;
            TimedSample {
                t_ms: 100 * k,
                pos: EnuPoint::new(50.0 + 30.0 * a.cos(), 50.0 + 30.0 * a.sin()),
            }
        })
        .collect()
}

#[test]
fn noiseless_flight_reproduces_truth() {
    let arr = array(EnuPoint::ORIGIN);
    let truth = circle_flight();
    let sim = tdoa::simulate_flight(&truth, &arr, 0.0, 5, &FlightOptions::default()).unwrap();
    assert_eq!(sim.rf.len(), 30);
    assert_eq!(sim.dropped, 0);
    for r in &sim.rf {
        let t = truth.iter().find(|s| s.t_ms == r.t_ms).unwrap();
        assert!(t.pos.distance(&r.pos) < 1e-5);
    }
}

#[test]
fn flight_simulation_is_seeded() {
    let arr = array(EnuPoint::ORIGIN);
    let truth = circle_flight();
    let opts = FlightOptions {
        outlier_rate: 0.2,
        ..Default::default()
    };
    let a = tdoa::simulate_flight(&truth, &arr, 3.3e-9, 9, &opts).unwrap();
    let b = tdoa::simulate_flight(&truth, &arr, 3.3e-9, 9, &opts).unwrap();
    let c = tdoa::simulate_flight(&truth, &arr, 3.3e-9, 10, &opts).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn calibration_hits_target_rmse() {
    let arr = array(EnuPoint::ORIGIN);
    let truth = circle_flight();
    let opts = FlightOptions {
        rf_period_ms: None,
        ..Default::default()
    };
    let sigma = tdoa::calibrate_sigma_t(&truth, &arr, 4.0, 1, &opts).unwrap();
    let sim = tdoa::simulate_flight(&truth, &arr, sigma, 1, &opts).unwrap();
    let rmse = tdoa::position_rmse(&truth, &sim.rf);
    assert!((rmse - 4.0).abs() < 0.2, "{rmse}");
}
