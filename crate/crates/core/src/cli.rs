//! End-to-end pipelines behind the `rftrack` binary.
//!
//! Every command takes a resolved [`RunConfig`], writes its artifacts into
//! the output directory and returns a machine-readable [`Summary`]. The
//! resolved configuration is echoed as `resolved_config.json` so a run can
//! be repeated from its own output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::dataio::{self, AlignedPair, DataError, Segment, SegmentPlan, TimedSample};
use crate::ekf::{self, EkfError, FilterConfig, RMode};
use crate::geodesy::{EnuPoint, GeoError, GeoPoint};
use crate::metrics::{self, MetricsError, SegmentErrors};
use crate::motionmodels::{self, MotionKind, NoiseSigmas};
use crate::tdoa::{self, FlightOptions, SensorArraySpec, SensorSpec, TdoaError};

pub const TRUTH_CSV: &str = "truth.csv";
pub const RF_CSV: &str = "rf.csv";
pub const SEGMENTS_JSON: &str = "segments.json";
pub const TRACK_CSV: &str = "track.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const CDF_RF_CSV: &str = "cdf_rf.csv";
pub const CDF_EKF_CSV: &str = "cdf_ekf.csv";
pub const RESOLVED_CONFIG_JSON: &str = "resolved_config.json";
pub const SUMMARY_JSON: &str = "summary.json";

/// Site used for simulated flights when the origin is `auto`.
pub const DEFAULT_SITE: GeoPoint = GeoPoint {
    lat_deg: 35.7713,
    lon_deg: -78.6557,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tdoa(#[from] TdoaError),
    #[error(transparent)]
    Ekf(#[from] EkfError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("config: {0}")]
    Config(String),
    #[error("{what} file not found: {path}")]
    MissingInput { what: &'static str, path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no aligned samples between {0}")]
    NothingAligned(String),
    #[error("no samples left after cleaning at {0} m")]
    EmptyAfterClean(f64),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AutoTag {
    #[serde(rename = "auto")]
    Auto,
}

/// Cartesian origin: a fixed point, or `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OriginSpec {
    Auto(AutoTag),
    Point(GeoPoint),
}

impl OriginSpec {
    pub const AUTO: OriginSpec = OriginSpec::Auto(AutoTag::Auto);

    pub fn point(&self) -> Option<GeoPoint> {
        match self {
            OriginSpec::Auto(_) => None,
            OriginSpec::Point(p) => Some(*p),
        }
    }
}

impl Default for OriginSpec {
    fn default() -> Self {
        OriginSpec::AUTO
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub tol_ms: i64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { tol_ms: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub threshold_m: f64,
    /// `false` reproduces the raw-data run.
    pub enabled: bool,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            threshold_m: 60.0,
            enabled: true,
        }
    }
}

/// One leg of a simulated flight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub mm: MotionKind,
    pub duration_s: f64,
    /// Turn rate for CT legs (rad/s).
    #[serde(default)]
    pub omega: f64,
    /// Along-track acceleration for CA legs (m/s²).
    #[serde(default)]
    pub accel: f64,
    /// Flown but left out of the segment file.
    #[serde(default)]
    pub exclude: bool,
    /// Written into the segment file; otherwise estimated at track time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<NoiseSigmas>,
}

impl LegSpec {
    pub fn ct(omega: f64, duration_s: f64) -> Self {
        LegSpec::new(MotionKind::Ct, duration_s).with(|l| l.omega = omega)
    }

    pub fn ca(accel: f64, duration_s: f64) -> Self {
        LegSpec::new(MotionKind::Ca, duration_s).with(|l| l.accel = accel)
    }

    pub fn cv(duration_s: f64) -> Self {
        LegSpec::new(MotionKind::Cv, duration_s)
    }

    fn new(mm: MotionKind, duration_s: f64) -> Self {
        LegSpec {
            id: None,
            mm,
            duration_s,
            omega: 0.0,
            accel: 0.0,
            exclude: false,
            sigmas: None,
        }
    }

    pub fn excluded(self) -> Self {
        self.with(|l| l.exclude = true)
    }

    fn with(mut self, f: impl FnOnce(&mut LegSpec)) -> Self {
        f(&mut self);
        self
    }
}

/// Eleven modelled segments (2 CT, 3 CA, 6 CV) in the order CT, CT, CV,
/// CA, CA, CV, CA, CV, CV, CV, CV. Excluded take-off and turn legs keep the
/// flight folded inside the default sensor array.
pub fn eleven_segment_legs() -> Vec<LegSpec> {
    vec![
        LegSpec::cv(5.0).excluded(),
        LegSpec::ct(0.15, 20.0),
        LegSpec::ct(-0.12, 15.0),
        LegSpec::cv(12.0),
        LegSpec::ct(0.35, 6.0).excluded(),
        LegSpec::ca(0.15, 12.0),
        LegSpec::ca(-0.15, 12.0),
        LegSpec::ct(0.35, 6.0).excluded(),
        LegSpec::cv(12.0),
        LegSpec::ca(0.12, 12.0),
        LegSpec::ct(0.30, 6.0).excluded(),
        LegSpec::cv(12.0),
        LegSpec::ct(-0.30, 6.0).excluded(),
        LegSpec::cv(12.0),
        LegSpec::ct(0.30, 6.0).excluded(),
        LegSpec::cv(12.0),
        LegSpec::ct(0.30, 6.0).excluded(),
        LegSpec::cv(12.0),
    ]
}

/// Four sensors around the default flight area.
pub fn default_sensors() -> SensorArraySpec {
    SensorArraySpec {
        reference_idx: 0,
        sensors: vec![
            SensorSpec::Local { x: -220.0, y: -150.0 },
            SensorSpec::Local { x: 200.0, y: -160.0 },
            SensorSpec::Local { x: 190.0, y: 160.0 },
            SensorSpec::Local { x: -210.0, y: 150.0 },
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    /// Timing noise per arrival-time difference (s).
    pub sigma_t: f64,
    /// When set, `sigma_t` is recalibrated to reach this position RMSE (m).
    pub target_rmse_m: Option<f64>,
    pub outlier_rate: f64,
    pub outlier_max_m: f64,
    pub t0_ms: i64,
    pub sample_period_ms: i64,
    pub rf_period_ms: i64,
    pub start: EnuPoint,
    pub speed_mps: f64,
    /// Initial course, degrees counter-clockwise from east.
    pub heading_deg: f64,
    pub legs: Vec<LegSpec>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            sigma_t: 3.3e-9,
            target_rmse_m: None,
            outlier_rate: 0.0,
            outlier_max_m: 200.0,
            t0_ms: 1_600_000_000_000,
            sample_period_ms: 100,
            rf_period_ms: 1000,
            start: EnuPoint::new(-40.0, -80.0),
            speed_mps: 4.0,
            heading_deg: 0.0,
            legs: eleven_segment_legs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSettings {
    pub r_mode: RMode,
    pub v_max: f64,
    pub init_acc_var: f64,
    pub init_omega_var: f64,
    /// Per-segment overrides keyed by segment id.
    pub sigmas: BTreeMap<String, NoiseSigmas>,
    /// Fallback when a segment has neither configured nor estimable sigmas.
    pub default_sigmas: Option<NoiseSigmas>,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings {
            r_mode: RMode::Mean,
            v_max: 20.0,
            init_acc_var: 25.0,
            init_omega_var: 0.1,
            sigmas: BTreeMap::new(),
            default_sigmas: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub out: PathBuf,
    pub truth: Option<PathBuf>,
    pub rf: Option<PathBuf>,
    pub segments: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out: PathBuf::from("out"),
            truth: None,
            rf: None,
            segments: None,
        }
    }
}

/// Everything a command needs, with defaults for absent fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub origin: OriginSpec,
    pub align: AlignConfig,
    pub clean: CleanConfig,
    pub sensors: SensorArraySpec,
    pub sim: SimConfig,
    pub filter: FilterSettings,
    pub paths: Paths,
    pub parallel: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            origin: OriginSpec::AUTO,
            align: AlignConfig::default(),
            clean: CleanConfig::default(),
            sensors: default_sensors(),
            sim: SimConfig::default(),
            filter: FilterSettings::default(),
            paths: Paths::default(),
            parallel: 1,
        }
    }
}

/// Command-line flags layered over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub raw: bool,
    pub parallel: Option<usize>,
    pub r_mode: Option<RMode>,
    pub threshold_m: Option<f64>,
    pub tol_ms: Option<i64>,
    pub truth: Option<PathBuf>,
    pub rf: Option<PathBuf>,
    pub segments: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                if !p.exists() {
                    return Err(CliError::MissingInput {
                        what: "config",
                        path: p.to_path_buf(),
                    });
                }
                let text = fs::read_to_string(p).map_err(io_err(p))?;
                RunConfig::from_json(&text)
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
        if let Some(seed) = o.seed {
            self.sim.seed = seed;
        }
        if o.raw {
            self.clean.enabled = false;
        }
        if let Some(n) = o.parallel {
            self.parallel = n;
        }
        if let Some(m) = o.r_mode {
            self.filter.r_mode = m;
        }
        if let Some(t) = o.threshold_m {
            self.clean.threshold_m = t;
        }
        if let Some(t) = o.tol_ms {
            self.align.tol_ms = t;
        }
        if let Some(p) = &o.truth {
            self.paths.truth = Some(p.clone());
        }
        if let Some(p) = &o.rf {
            self.paths.rf = Some(p.clone());
        }
        if let Some(p) = &o.segments {
            self.paths.segments = Some(p.clone());
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if let Some(p) = self.origin.point() {
            p.validate()?;
        }
        if self.align.tol_ms < 0 {
            return Err(CliError::Config(format!(
                "align.tol_ms must be >= 0, got {}",
                self.align.tol_ms
            )));
        }
        if !(self.clean.threshold_m > 0.0) {
            return Err(CliError::Config(format!(
                "clean.threshold_m must be positive, got {}",
                self.clean.threshold_m
            )));
        }
        if !(self.filter.v_max >= 0.0 && self.filter.init_acc_var >= 0.0 && self.filter.init_omega_var >= 0.0) {
            return Err(CliError::Config("initial covariance settings must be non-negative".into()));
        }
        Ok(())
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.paths.out.join(name)
    }

    fn input(&self, what: &'static str, configured: &Option<PathBuf>, default: &str) -> Result<PathBuf, CliError> {
        let path = configured.clone().unwrap_or_else(|| self.out_file(default));
        if !path.is_file() {
            return Err(CliError::MissingInput { what, path });
        }
        Ok(path)
    }
}

/// Warnings gathered during a run; each is also logged.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Warnings(pub Vec<String>);

impl Warnings {
    pub fn push(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.0.push(msg);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Result of a command, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub command: String,
    pub warnings: usize,
    pub warning_messages: Vec<String>,
    pub details: Value,
}

impl Summary {
    fn new(command: &str, warnings: Warnings, details: Value) -> Self {
        Summary {
            command: command.to_string(),
            warnings: warnings.len(),
            warning_messages: warnings.0,
            details,
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn prepare_out(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.paths.out).map_err(io_err(&cfg.paths.out))
}

fn finish(cfg: &RunConfig, summary: &Summary) -> Result<(), CliError> {
    write_json(&cfg.out_file(RESOLVED_CONFIG_JSON), cfg)?;
    write_json(&cfg.out_file(SUMMARY_JSON), summary)
}

/// Ground truth of a chained-leg flight plus the time window of each leg.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFlight {
    pub truth: Vec<TimedSample<EnuPoint>>,
    /// `(first_ms, last_ms)` per leg, inclusive.
    pub windows: Vec<(i64, i64)>,
}

/// Integrates the legs exactly at the sample period.
pub fn build_trajectory(sim: &SimConfig) -> Result<SyntheticFlight, CliError> {
    if sim.sample_period_ms <= 0 {
        return Err(CliError::Config("sim.sample_period_ms must be positive".into()));
    }
    if sim.legs.is_empty() {
        return Err(CliError::Config("sim.legs is empty".into()));
    }
    let dt = sim.sample_period_ms as f64 / 1000.0;
    let heading = sim.heading_deg.to_radians();
    let mut pos = sim.start;
    let mut vel = EnuPoint::new(sim.speed_mps * heading.cos(), sim.speed_mps * heading.sin());
    let mut t = sim.t0_ms;
    let mut truth = vec![TimedSample { t_ms: t, pos }];
    let mut windows = Vec::with_capacity(sim.legs.len());
    for (i, leg) in sim.legs.iter().enumerate() {
        if !(leg.duration_s > 0.0) || !leg.omega.is_finite() || !leg.accel.is_finite() {
            return Err(CliError::Config(format!("leg {i}: invalid duration or parameters")));
        }
        let steps = (leg.duration_s / dt).round() as usize;
        if steps == 0 {
            return Err(CliError::Config(format!("leg {i}: shorter than one sample period")));
        }
        // CA legs accelerate along the course held at leg entry.
        let course = if vel.norm() > 0.0 {
            vel * (1.0 / vel.norm())
        } else {
            EnuPoint::new(heading.cos(), heading.sin())
        };
        let acc = course * leg.accel;
        let start = t;
        for _ in 0..steps {
            match leg.mm {
                MotionKind::Cv => pos = pos + vel * dt,
                MotionKind::Ca => {
                    pos = pos + vel * dt + acc * (0.5 * dt * dt);
                    vel = vel + acc * dt;
                }
                MotionKind::Ct => {
                    let s = nalgebra::DVector::from_vec(vec![pos.x, pos.y, vel.x, vel.y, leg.omega]);
                    let next = motionmodels::transition(MotionKind::Ct, &s, dt)
                        .expect("CT state has five components");
                    pos = EnuPoint::new(next[0], next[1]);
                    vel = EnuPoint::new(next[2], next[3]);
                }
            }
            t += sim.sample_period_ms;
            truth.push(TimedSample { t_ms: t, pos });
        }
        windows.push((start, t));
    }
    Ok(SyntheticFlight { truth, windows })
}

/// Maps each non-excluded leg onto the aligned index range it covers.
///
/// An epoch on a leg boundary belongs to the leg that starts there.
fn legs_to_segments(
    legs: &[LegSpec],
    windows: &[(i64, i64)],
    pairs: &[AlignedPair],
    warnings: &mut Warnings,
) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut n = 0;
    let last = legs.len().saturating_sub(1);
    for (i, (leg, (start, end))) in legs.iter().zip(windows).enumerate() {
        if leg.exclude {
            continue;
        }
        n += 1;
        let id = leg.id.clone().unwrap_or_else(|| format!("S{n}"));
        let inside = |t: i64| t >= *start && (t < *end || (i == last && t == *end));
        let idx: Vec<usize> = pairs.iter().filter(|p| inside(p.t_ms)).map(|p| p.idx).collect();
        match (idx.first(), idx.last()) {
            (Some(&a), Some(&b)) => out.push(Segment {
                id,
                start_idx: a,
                end_idx: b,
                mm: leg.mm,
                sigmas: leg.sigmas,
            }),
            _ => warnings.push(format!("leg `{id}` has no RF fixes; no segment written")),
        }
    }
    out
}

fn sim_origin(cfg: &RunConfig) -> GeoPoint {
    cfg.origin.point().unwrap_or(DEFAULT_SITE)
}

/// Generates `truth.csv`, `rf.csv` and `segments.json` from the leg list.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Summary, CliError> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    prepare_out(&cfg)?;
    let mut warnings = Warnings::default();
    let origin = sim_origin(&cfg);
    let arr = cfg.sensors.resolve(&origin)?;
    let flight = build_trajectory(&cfg.sim)?;
    let opts = FlightOptions {
        rf_period_ms: Some(cfg.sim.rf_period_ms).filter(|p| *p > 0),
        outlier_rate: cfg.sim.outlier_rate,
        outlier_max_m: cfg.sim.outlier_max_m,
    };
    if let Some(target) = cfg.sim.target_rmse_m {
        cfg.sim.sigma_t = tdoa::calibrate_sigma_t(&flight.truth, &arr, target, cfg.sim.seed, &opts)?;
    }
    let sim = tdoa::simulate_flight(&flight.truth, &arr, cfg.sim.sigma_t, cfg.sim.seed, &opts)?;
    if sim.dropped > 0 {
        warnings.push(format!("{} epochs dropped by the TDoA solver", sim.dropped));
    }
    if sim.unconverged > 0 {
        warnings.push(format!("{} TDoA fixes hit the iteration cap", sim.unconverged));
    }

    let pairs = dataio::align(&flight.truth, &sim.rf, 0);
    let segments = legs_to_segments(&cfg.sim.legs, &flight.windows, &pairs, &mut warnings);

    dataio::write_geo_log(&cfg.out_file(TRUTH_CSV), &dataio::unproject(&flight.truth, &origin)?)?;
    dataio::write_geo_log(&cfg.out_file(RF_CSV), &dataio::unproject(&sim.rf, &origin)?)?;
    dataio::write_segments(&cfg.out_file(SEGMENTS_JSON), &segments)?;

    let rmse = tdoa::position_rmse(&flight.truth, &sim.rf);
    let details = json!({
        "origin": origin,
        "sigma_t": cfg.sim.sigma_t,
        "truth_samples": flight.truth.len(),
        "rf_samples": sim.rf.len(),
        "dropped": sim.dropped,
        "outliers": sim.outliers,
        "rf_rmse_m": rmse,
        "segments": segments.len(),
    });
    let summary = Summary::new("simulate", warnings, details);
    finish(&cfg, &summary)?;
    Ok(summary)
}

/// Truth/RF logs projected to a common local frame.
struct LoadedLogs {
    origin: GeoPoint,
    uav: Vec<TimedSample<EnuPoint>>,
    est: Vec<TimedSample<EnuPoint>>,
}

fn load_logs(cfg: &RunConfig, truth: &Path, est: &Path, warnings: &mut Warnings) -> Result<LoadedLogs, CliError> {
    let mut read = |path: &Path| -> Result<Vec<TimedSample<GeoPoint>>, CliError> {
        let parsed = dataio::read_log_file(path)?;
        if parsed.duplicates > 0 {
            warnings.push(format!(
                "{}: dropped {} duplicate timestamps",
                path.display(),
                parsed.duplicates
            ));
        }
        Ok(parsed.samples)
    };
    let uav = read(truth)?;
    let est_geo = read(est)?;
    let origin = cfg.origin.point().unwrap_or(uav[0].pos);
    Ok(LoadedLogs {
        origin,
        uav: dataio::project(&uav, &origin)?,
        est: dataio::project(&est_geo, &origin)?,
    })
}

fn truth_of(pairs: &[AlignedPair]) -> Vec<TimedSample<EnuPoint>> {
    pairs
        .iter()
        .map(|p| TimedSample {
            t_ms: p.t_ms,
            pos: p.uav,
        })
        .collect()
}

/// Fills in process-noise sigmas: config override, then the segment file,
/// then an estimate from the segment's aligned ground truth, then the
/// configured fallback.
fn resolve_sigmas(
    cfg: &RunConfig,
    plan: &SegmentPlan,
    aligned: &[AlignedPair],
    warnings: &mut Warnings,
) -> SegmentPlan {
    let mut plan = plan.clone();
    for seg in &mut plan.segments {
        if let Some(sig) = cfg.filter.sigmas.get(&seg.id) {
            seg.sigmas = Some(*sig);
            continue;
        }
        if seg.sigmas.is_some() {
            continue;
        }
        let truth = truth_of(&aligned[seg.start_idx..=seg.end_idx]);
        let samples = motionmodels::finite_difference_velocities(&truth);
        match motionmodels::estimate_process_sigmas(&samples) {
            Ok(sig) => seg.sigmas = Some(sig),
            Err(e) => {
                seg.sigmas = cfg.filter.default_sigmas;
                warnings.push(format!("segment `{}`: cannot estimate process noise ({e})", seg.id));
            }
        }
    }
    plan
}

fn fmt_f(v: f64) -> String {
    v.to_string()
}

/// Align, optionally clean, filter each segment, and report.
pub fn cmd_track(cfg: &RunConfig) -> Result<Summary, CliError> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    let truth_path = cfg.input("truth", &cfg.paths.truth, TRUTH_CSV)?;
    let rf_path = cfg.input("RF", &cfg.paths.rf, RF_CSV)?;
    let seg_path = cfg.input("segments", &cfg.paths.segments, SEGMENTS_JSON)?;
    cfg.paths.truth = Some(truth_path.clone());
    cfg.paths.rf = Some(rf_path.clone());
    cfg.paths.segments = Some(seg_path.clone());
    prepare_out(&cfg)?;
    let mut warnings = Warnings::default();

    let logs = load_logs(&cfg, &truth_path, &rf_path, &mut warnings)?;
    let aligned = dataio::align(&logs.uav, &logs.est, cfg.align.tol_ms);
    if aligned.is_empty() {
        return Err(CliError::NothingAligned(format!(
            "{} and {}",
            truth_path.display(),
            rf_path.display()
        )));
    }
    let plan = dataio::load_segments(&seg_path, aligned.len())?;
    let pairs = if cfg.clean.enabled {
        dataio::clean(&aligned, cfg.clean.threshold_m)?
    } else {
        aligned.clone()
    };
    if pairs.is_empty() {
        return Err(CliError::EmptyAfterClean(cfg.clean.threshold_m));
    }
    let r = ekf::estimate_r(&pairs, cfg.filter.r_mode)?;
    let plan = resolve_sigmas(&cfg, &plan, &aligned, &mut warnings);
    let filter = FilterConfig {
        r,
        v_max: cfg.filter.v_max,
        init_acc_var: cfg.filter.init_acc_var,
        init_omega_var: cfg.filter.init_omega_var,
        default_sigmas: cfg.filter.default_sigmas,
    };
    let run = ekf::run_trajectory(&plan, &pairs, &filter, cfg.parallel.max(1))?;
    for (id, e) in &run.failures {
        warnings.push(format!("segment `{id}` skipped: {e}"));
    }

    let by_idx: BTreeMap<usize, &AlignedPair> = pairs.iter().map(|p| (p.idx, p)).collect();
    let mut track_rows = Vec::new();
    let mut seg_errors = Vec::new();
    let (mut all_rf, mut all_ekf) = (Vec::new(), Vec::new());
    for (seg, track) in &run.tracks {
        let mut errs = SegmentErrors {
            id: seg.id.clone(),
            mm: seg.mm,
            rf: Vec::new(),
            ekf: Vec::new(),
        };
        for entry in &track.entries {
            let pair = by_idx[&entry.idx];
            let rf_e = pair.error();
            let ekf_e = pair.uav.distance(&entry.pos);
            errs.rf.push(rf_e);
            errs.ekf.push(ekf_e);
            track_rows.push(vec![
                seg.id.clone(),
                entry.idx.to_string(),
                entry.t_ms.to_string(),
                fmt_f(entry.pos.x),
                fmt_f(entry.pos.y),
                fmt_f(pair.rf.x),
                fmt_f(pair.rf.y),
                fmt_f(pair.uav.x),
                fmt_f(pair.uav.y),
            ]);
        }
        all_rf.extend_from_slice(&errs.rf);
        all_ekf.extend_from_slice(&errs.ekf);
        seg_errors.push(errs);
    }
    let report = metrics::segment_report(&seg_errors);
    for id in &report.omitted {
        warnings.push(format!("segment `{id}` has no data; omitted from the report"));
    }
    let (velocity, no_velocity) = metrics::velocity_profile(&truth_of(&aligned), &plan.segments);
    for id in no_velocity {
        warnings.push(format!("segment `{id}`: too few samples for a velocity profile"));
    }

    dataio::write_rows(
        &cfg.out_file(TRACK_CSV),
        &["segment", "idx", "t_ms", "ekf_x", "ekf_y", "rf_x", "rf_y", "uav_x", "uav_y"],
        track_rows,
    )?;
    write_text(&cfg.out_file(REPORT_CSV), &report.to_csv())?;
    let (cdf_rf, cdf_ekf, overall) = if all_rf.is_empty() {
        warnings.push("no segment produced a track");
        (String::from("error_m,fraction\n"), String::from("error_m,fraction\n"), Value::Null)
    } else {
        (
            metrics::cdf(&all_rf)?.to_csv(),
            metrics::cdf(&all_ekf)?.to_csv(),
            json!({ "rf": metrics::stats(&all_rf)?, "ekf": metrics::stats(&all_ekf)? }),
        )
    };
    write_text(&cfg.out_file(CDF_RF_CSV), &cdf_rf)?;
    write_text(&cfg.out_file(CDF_EKF_CSV), &cdf_ekf)?;

    let segments: Vec<Value> = plan
        .segments
        .iter()
        .map(|s| json!({ "id": s.id, "mm": s.mm, "start_idx": s.start_idx, "end_idx": s.end_idx, "sigmas": s.sigmas }))
        .collect();
    let details = json!({
        "origin": logs.origin,
        "aligned": aligned.len(),
        "retained": pairs.len(),
        "cleaned": cfg.clean.enabled,
        "excluded_indices": plan.excluded().len(),
        "r": [[r[(0, 0)], r[(0, 1)]], [r[(1, 0)], r[(1, 1)]]],
        "segments": segments,
        "overall": overall,
        "velocity_profile": velocity,
        "report_text": report.to_text(),
    });
    let summary = Summary::new("track", warnings, details);
    finish(&cfg, &summary)?;
    Ok(summary)
}

/// Metrics only: align an arbitrary estimate log with the truth and report
/// its error statistics, overall and per segment.
pub fn cmd_evaluate(cfg: &RunConfig, est: &Path) -> Result<Summary, CliError> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    let truth_path = cfg.input("truth", &cfg.paths.truth, TRUTH_CSV)?;
    if !est.is_file() {
        return Err(CliError::MissingInput {
            what: "estimate",
            path: est.to_path_buf(),
        });
    }
    cfg.paths.truth = Some(truth_path.clone());
    prepare_out(&cfg)?;
    let mut warnings = Warnings::default();
    let logs = load_logs(&cfg, &truth_path, est, &mut warnings)?;
    let aligned = dataio::align(&logs.uav, &logs.est, cfg.align.tol_ms);
    if aligned.is_empty() {
        return Err(CliError::NothingAligned(format!(
            "{} and {}",
            truth_path.display(),
            est.display()
        )));
    }
    let errors: Vec<f64> = aligned.iter().map(AlignedPair::error).collect();
    let mut rows = vec![stats_row("all", "", &errors)?];
    if let Some(seg_path) = &cfg.paths.segments {
        if !seg_path.is_file() {
            return Err(CliError::MissingInput {
                what: "segments",
                path: seg_path.clone(),
            });
        }
        let plan = dataio::load_segments(seg_path, aligned.len())?;
        for seg in &plan.segments {
            let e: Vec<f64> = errors[seg.start_idx..=seg.end_idx].to_vec();
            rows.push(stats_row(&seg.id, seg.mm.label(), &e)?);
        }
    }
    dataio::write_rows(
        &cfg.out_file("evaluate.csv"),
        &["segment", "mm", "n", "min_m", "max_m", "mean_m", "std_m"],
        rows,
    )?;
    write_text(&cfg.out_file("cdf_est.csv"), &metrics::cdf(&errors)?.to_csv())?;
    let details = json!({
        "estimate": est,
        "aligned": aligned.len(),
        "stats": metrics::stats(&errors)?,
    });
    let summary = Summary::new("evaluate", warnings, details);
    finish(&cfg, &summary)?;
    Ok(summary)
}

fn stats_row(id: &str, mm: &str, errors: &[f64]) -> Result<Vec<String>, CliError> {
    let s = metrics::stats(errors)?;
    Ok(vec![
        id.to_string(),
        mm.to_string(),
        s.n.to_string(),
        fmt_f(s.min_m),
        fmt_f(s.max_m),
        fmt_f(s.mean_m),
        fmt_f(s.std_m),
    ])
}

/// Writes `aligned.csv`: truth and RF logs matched on timestamps, in
/// local metres.
pub fn cmd_align(cfg: &RunConfig) -> Result<Summary, CliError> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    let truth_path = cfg.input("truth", &cfg.paths.truth, TRUTH_CSV)?;
    let rf_path = cfg.input("RF", &cfg.paths.rf, RF_CSV)?;
    cfg.paths.truth = Some(truth_path.clone());
    cfg.paths.rf = Some(rf_path.clone());
    prepare_out(&cfg)?;
    let mut warnings = Warnings::default();
    let logs = load_logs(&cfg, &truth_path, &rf_path, &mut warnings)?;
    let aligned = dataio::align(&logs.uav, &logs.est, cfg.align.tol_ms);
    dataio::write_pairs(&cfg.out_file("aligned.csv"), &aligned)?;
    let details = json!({
        "origin": logs.origin,
        "uav_samples": logs.uav.len(),
        "rf_samples": logs.est.len(),
        "aligned": aligned.len(),
    });
    let summary = Summary::new("align", warnings, details);
    finish(&cfg, &summary)?;
    Ok(summary)
}

/// Writes `clean.csv`: the pairs of an aligned file whose error does not
/// exceed the threshold.
pub fn cmd_clean(cfg: &RunConfig, input: &Path) -> Result<Summary, CliError> {
    cfg.validate()?;
    if !input.is_file() {
        return Err(CliError::MissingInput {
            what: "aligned",
            path: input.to_path_buf(),
        });
    }
    prepare_out(cfg)?;
    let pairs = dataio::read_pairs_file(input)?;
    let kept = dataio::clean(&pairs, cfg.clean.threshold_m)?;
    dataio::write_pairs(&cfg.out_file("clean.csv"), &kept)?;
    let mut details = json!({
        "input": input,
        "threshold_m": cfg.clean.threshold_m,
        "before": pairs.len(),
        "after": kept.len(),
    });
    if !pairs.is_empty() {
        let raw: Vec<f64> = pairs.iter().map(AlignedPair::error).collect();
        details["raw_stats"] = json!(metrics::stats(&raw)?);
    }
    if !kept.is_empty() {
        let clean: Vec<f64> = kept.iter().map(AlignedPair::error).collect();
        details["clean_stats"] = json!(metrics::stats(&clean)?);
    }
    let summary = Summary::new("clean", Warnings::default(), details);
    finish(cfg, &summary)?;
    Ok(summary)
}

/// Converts a `t_ms,lat_deg,lon_deg` log to `t_ms,x_m,y_m`.
pub fn cmd_convert(cfg: &RunConfig, input: &Path) -> Result<Summary, CliError> {
    cfg.validate()?;
    if !input.is_file() {
        return Err(CliError::MissingInput {
            what: "position log",
            path: input.to_path_buf(),
        });
    }
    prepare_out(cfg)?;
    let mut warnings = Warnings::default();
    let parsed = dataio::read_log_file(input)?;
    if parsed.duplicates > 0 {
        warnings.push(format!(
            "{}: dropped {} duplicate timestamps",
            input.display(),
            parsed.duplicates
        ));
    }
    let origin = cfg.origin.point().unwrap_or(parsed.samples[0].pos);
    let enu = dataio::project(&parsed.samples, &origin)?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "log".into());
    let out = cfg.out_file(&format!("{stem}_enu.csv"));
    dataio::write_enu_log(&out, &enu)?;
    let details = json!({ "input": input, "output": out, "origin": origin, "samples": enu.len() });
    let summary = Summary::new("convert", warnings, details);
    finish(cfg, &summary)?;
    Ok(summary)
}
