//! Log parsing, timestamp alignment, error-threshold cleaning and segment
//! definitions.
//!
//! Position logs are CSV with the header `t_ms,lat_deg,lon_deg`. Aligned
//! pair files (written by the `align` and `clean` commands) use
//! `idx,t_ms,uav_x,uav_y,rf_x,rf_y` in local metres.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{self, EnuPoint, GeoError, GeoPoint};
use crate::motionmodels::{MotionKind, NoiseSigmas};

pub const LOG_HEADER: [&str; 3] = ["t_ms", "lat_deg", "lon_deg"];
pub const ENU_HEADER: [&str; 3] = ["t_ms", "x_m", "y_m"];
pub const PAIR_HEADER: [&str; 6] = ["idx", "t_ms", "uav_x", "uav_y", "rf_x", "rf_y"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("line {line}: {source}")]
    Range {
        line: u64,
        #[source]
        source: GeoError,
    },
    #[error("unexpected header `{found}`, expected `{expected}`")]
    Header { expected: String, found: String },
    #[error("input contains no samples")]
    Empty,
    #[error("segment file: {0}")]
    Json(String),
    #[error("segments `{first}` and `{second}` overlap")]
    Overlap { first: String, second: String },
    #[error("segment `{id}`: unknown motion model `{label}`")]
    UnknownModel { id: String, label: String },
    #[error("segment `{id}`: index range [{start}, {end}] is invalid for {len} aligned samples")]
    SegmentRange {
        id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("duplicate segment id `{0}`")]
    DuplicateId(String),
    #[error("segment `{id}`: {msg}")]
    SegmentSigmas { id: String, msg: String },
    #[error("cleaning threshold must be positive, got {0}")]
    Threshold(f64),
    #[error("projection: {0}")]
    Geo(#[from] GeoError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A position with its epoch in integer milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedSample<P> {
    pub t_ms: i64,
    pub pos: P,
}

/// Ground truth and sensor estimate matched at one epoch.
///
/// `idx` is the position of the pair in the aligned sequence; it survives
/// cleaning so segment index ranges stay valid on cleaned data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedPair<P = EnuPoint> {
    pub idx: usize,
    pub t_ms: i64,
    pub uav: P,
    pub rf: P,
}

impl AlignedPair<EnuPoint> {
    pub fn error(&self) -> f64 {
        self.uav.distance(&self.rf)
    }
}

/// A parsed position log plus the number of duplicate timestamps dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLog {
    pub samples: Vec<TimedSample<GeoPoint>>,
    pub duplicates: usize,
}

#[derive(Debug, Deserialize)]
struct LogRow {
    t_ms: i64,
    lat_deg: f64,
    lon_deg: f64,
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), DataError> {
    if found.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(DataError::Header {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

fn csv_line(err: &csv::Error) -> u64 {
    err.position().map(|p| p.line()).unwrap_or(0)
}

fn reader_from<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

/// Sorts by timestamp and collapses duplicates to their first occurrence.
fn sort_dedup<P>(mut samples: Vec<TimedSample<P>>) -> (Vec<TimedSample<P>>, usize) {
    // stable: equal timestamps keep file order
    samples.sort_by_key(|s| s.t_ms);
    let before = samples.len();
    samples.dedup_by_key(|s| s.t_ms);
    let dropped = before - samples.len();
    (samples, dropped)
}

/// Parses a `t_ms,lat_deg,lon_deg` log from any reader.
pub fn read_log<R: Read>(input: R) -> Result<ParsedLog, DataError> {
    let mut rdr = reader_from(input);
    let header = rdr.headers().map_err(|e| DataError::Parse {
        line: csv_line(&e).max(1),
        msg: e.to_string(),
    })?;
    check_header(header, &LOG_HEADER)?;
    let mut samples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Parse {
            line: csv_line(&e),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row: LogRow = rec.deserialize(None).map_err(|e| DataError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let pos = GeoPoint::new(row.lat_deg, row.lon_deg)
            .map_err(|source| DataError::Range { line, source })?;
        samples.push(TimedSample { t_ms: row.t_ms, pos });
    }
    if samples.is_empty() {
        return Err(DataError::Empty);
    }
    let (samples, duplicates) = sort_dedup(samples);
    Ok(ParsedLog {
        samples,
        duplicates,
    })
}

pub fn read_log_file(path: &Path) -> Result<ParsedLog, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_log(file)
}

fn parse_log_file(path: &Path) -> Result<Vec<TimedSample<GeoPoint>>, DataError> {
    let parsed = read_log_file(path)?;
    if parsed.duplicates > 0 {
        log::warn!(
            "{}: dropped {} samples with duplicate timestamps",
            path.display(),
            parsed.duplicates
        );
    }
    Ok(parsed.samples)
}

/// UAV ground-truth log (nominally 10 Hz).
pub fn parse_uav_log(path: &Path) -> Result<Vec<TimedSample<GeoPoint>>, DataError> {
    parse_log_file(path)
}

/// RF sensor estimate log (nominally 1 Hz).
pub fn parse_rf_log(path: &Path) -> Result<Vec<TimedSample<GeoPoint>>, DataError> {
    parse_log_file(path)
}

/// Projects a geodetic log onto the tangent plane at `origin`.
pub fn project(
    samples: &[TimedSample<GeoPoint>],
    origin: &GeoPoint,
) -> Result<Vec<TimedSample<EnuPoint>>, DataError> {
    samples
        .iter()
        .map(|s| {
            Ok(TimedSample {
                t_ms: s.t_ms,
                pos: geodesy::to_enu(&s.pos, origin)?,
            })
        })
        .collect()
}

/// Inverse of [`project`].
pub fn unproject(
    samples: &[TimedSample<EnuPoint>],
    origin: &GeoPoint,
) -> Result<Vec<TimedSample<GeoPoint>>, DataError> {
    samples
        .iter()
        .map(|s| {
            Ok(TimedSample {
                t_ms: s.t_ms,
                pos: geodesy::from_enu(&s.pos, origin)?,
            })
        })
        .collect()
}

/// Pairs each RF sample with the nearest unused UAV sample within
/// `±tol_ms`.
///
/// Matches are kept monotone: the UAV candidate must come after the one
/// used by the previous match. Ties go to the earlier UAV sample. The pair
/// carries the RF timestamp.
pub fn align<P: Copy>(
    uav: &[TimedSample<P>],
    rf: &[TimedSample<P>],
    tol_ms: i64,
) -> Vec<AlignedPair<P>> {
    let tol = tol_ms.max(0);
    let mut out = Vec::with_capacity(rf.len().min(uav.len()));
    // first UAV index not yet consumed
    let mut next = 0usize;
    for r in rf {
        // skip UAV samples that are too early for this and all later RF samples
        while next < uav.len() && uav[next].t_ms < r.t_ms - tol {
            next += 1;
        }
        let mut best: Option<(usize, i64)> = None;
        for (j, u) in uav.iter().enumerate().skip(next) {
            let d = (u.t_ms - r.t_ms).abs();
            if u.t_ms > r.t_ms + tol {
                break;
            }
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            out.push(AlignedPair {
                idx: out.len(),
                t_ms: r.t_ms,
                uav: uav[j].pos,
                rf: r.pos,
            });
            next = j + 1;
        }
    }
    out
}

fn check_threshold(threshold_m: f64) -> Result<(), DataError> {
    if threshold_m > 0.0 && !threshold_m.is_nan() {
        Ok(())
    } else {
        Err(DataError::Threshold(threshold_m))
    }
}

/// Keeps the pairs whose truth-to-estimate distance is at most
/// `threshold_m`; only errors strictly above the threshold are removed.
pub fn clean(pairs: &[AlignedPair], threshold_m: f64) -> Result<Vec<AlignedPair>, DataError> {
    check_threshold(threshold_m)?;
    Ok(pairs
        .iter()
        .filter(|p| p.error() <= threshold_m)
        .copied()
        .collect())
}

/// Trajectory slice `[start_idx, end_idx]` (inclusive, aligned indices)
/// filtered with a single motion model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    pub id: String,
    pub start_idx: usize,
    pub end_idx: usize,
    pub mm: MotionKind,
    /// Process-noise sigmas; when absent they are estimated from the
    /// ground truth of the segment.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<NoiseSigmas>,
}

impl Segment {
    pub fn contains(&self, idx: usize) -> bool {
        (self.start_idx..=self.end_idx).contains(&idx)
    }
}

#[derive(Debug, Deserialize)]
struct SegmentEntry {
    id: String,
    start_idx: usize,
    end_idx: usize,
    mm: String,
    #[serde(default)]
    sigmas: Option<NoiseSigmas>,
}

/// Validated segments over an aligned sequence of `len` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPlan {
    pub segments: Vec<Segment>,
    pub len: usize,
}

impl SegmentPlan {
    /// Sorts and validates segments: ranges inside `[0, len)`, no overlap,
    /// unique ids, non-negative sigmas.
    pub fn new(mut segments: Vec<Segment>, len: usize) -> Result<Self, DataError> {
        let mut ids = HashSet::new();
        for s in &segments {
            if !ids.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
            if s.start_idx > s.end_idx || s.end_idx >= len {
                return Err(DataError::SegmentRange {
                    id: s.id.clone(),
                    start: s.start_idx,
                    end: s.end_idx,
                    len,
                });
            }
            if let Some(sig) = &s.sigmas {
                sig.validate().map_err(|e| DataError::SegmentSigmas {
                    id: s.id.clone(),
                    msg: e.to_string(),
                })?;
            }
        }
        segments.sort_by(|a, b| (a.start_idx, &a.id).cmp(&(b.start_idx, &b.id)));
        for w in segments.windows(2) {
            if w[1].start_idx <= w[0].end_idx {
                return Err(DataError::Overlap {
                    first: w[0].id.clone(),
                    second: w[1].id.clone(),
                });
            }
        }
        Ok(SegmentPlan { segments, len })
    }

    /// Aligned indices not covered by any segment.
    pub fn excluded(&self) -> Vec<usize> {
        (0..self.len)
            .filter(|i| !self.segments.iter().any(|s| s.contains(*i)))
            .collect()
    }

    pub fn segment_of(&self, idx: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.contains(idx))
    }
}

/// Parses a segment JSON array and validates it against `len` aligned
/// samples.
pub fn parse_segments(json: &str, len: usize) -> Result<SegmentPlan, DataError> {
    let entries: Vec<SegmentEntry> =
        serde_json::from_str(json).map_err(|e| DataError::Json(e.to_string()))?;
    let segments = entries
        .into_iter()
        .map(|e| {
            let mm = e.mm.parse::<MotionKind>().map_err(|_| DataError::UnknownModel {
                id: e.id.clone(),
                label: e.mm.clone(),
            })?;
            Ok(Segment {
                id: e.id,
                start_idx: e.start_idx,
                end_idx: e.end_idx,
                mm,
                sigmas: e.sigmas,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    SegmentPlan::new(segments, len)
}

pub fn load_segments(path: &Path, len: usize) -> Result<SegmentPlan, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_segments(&text, len)
}

pub fn write_segments(path: &Path, segments: &[Segment]) -> Result<(), DataError> {
    let mut text =
        serde_json::to_string_pretty(segments).map_err(|e| DataError::Json(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| DataError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, DataError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| DataError::io(path, e))
}

/// Writes CSV rows of pre-formatted fields.
pub(crate) fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), DataError>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[String]>,
{
    let mut w = create(path)?;
    let io = |e| DataError::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for row in rows {
        writeln!(w, "{}", row.as_ref().join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_geo_log(path: &Path, samples: &[TimedSample<GeoPoint>]) -> Result<(), DataError> {
    write_rows(
        path,
        &LOG_HEADER,
        samples.iter().map(|s| {
            [
                s.t_ms.to_string(),
                s.pos.lat_deg.to_string(),
                s.pos.lon_deg.to_string(),
            ]
        }),
    )
}

pub fn write_enu_log(path: &Path, samples: &[TimedSample<EnuPoint>]) -> Result<(), DataError> {
    write_rows(
        path,
        &ENU_HEADER,
        samples
            .iter()
            .map(|s| [s.t_ms.to_string(), s.pos.x.to_string(), s.pos.y.to_string()]),
    )
}

pub fn write_pairs(path: &Path, pairs: &[AlignedPair]) -> Result<(), DataError> {
    write_rows(
        path,
        &PAIR_HEADER,
        pairs.iter().map(|p| {
            [
                p.idx.to_string(),
                p.t_ms.to_string(),
                p.uav.x.to_string(),
                p.uav.y.to_string(),
                p.rf.x.to_string(),
                p.rf.y.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Deserialize)]
struct PairRow {
    idx: usize,
    t_ms: i64,
    uav_x: f64,
    uav_y: f64,
    rf_x: f64,
    rf_y: f64,
}

pub fn read_pairs<R: Read>(input: R) -> Result<Vec<AlignedPair>, DataError> {
    let mut rdr = reader_from(input);
    let header = rdr.headers().map_err(|e| DataError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    check_header(header, &PAIR_HEADER)?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<PairRow>() {
        let row = row.map_err(|e| DataError::Parse {
            line: csv_line(&e),
            msg: e.to_string(),
        })?;
        out.push(AlignedPair {
            idx: row.idx,
            t_ms: row.t_ms,
            uav: EnuPoint::new(row.uav_x, row.uav_y),
            rf: EnuPoint::new(row.rf_x, row.rf_y),
        });
    }
    Ok(out)
}

pub fn read_pairs_file(path: &Path) -> Result<Vec<AlignedPair>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_pairs(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(text: &str) -> Result<ParsedLog, DataError> {
        read_log(text.as_bytes())
    }

    #[test]
    fn parses_rows_in_order() {
        let p = log("t_ms,lat_deg,lon_deg\n1000,35.8,-78.7\n1100,35.8001,-78.7\n1200,35.8002,-78.7\n")
            .unwrap();
        assert_eq!(p.samples.len(), 3);
        assert_eq!(p.duplicates, 0);
        assert_eq!(
            p.samples.iter().map(|s| s.t_ms).collect::<Vec<_>>(),
            vec![1000, 1100, 1200]
        );
    }

    #[test]
    fn sorts_out_of_order_rows() {
        let p = log("t_ms,lat_deg,lon_deg\n3,1,1\n1,2,2\n2,3,3\n").unwrap();
        assert_eq!(
            p.samples.iter().map(|s| s.t_ms).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert_eq!(p.samples[0].pos.lat_deg, 2.0);
    }

    #[test]
    fn duplicate_timestamps_keep_first() {
        let p = log("t_ms,lat_deg,lon_deg\n5,1,1\n5,2,2\n4,3,3\n").unwrap();
        assert_eq!(p.duplicates, 1);
        assert_eq!(p.samples.len(), 2);
        assert_eq!(p.samples[1].pos.lat_deg, 1.0);
    }

    #[test]
    fn latitude_out_of_range_names_line() {
        let err = log("t_ms,lat_deg,lon_deg\n1,35,-78\n2,91,-78\n").unwrap_err();
        match err {
            DataError::Range { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_string("t_ms,lat_deg,lon_deg\n1,35,-78\n2,91,-78\n").contains("line 3"));
    }

    fn err_string(text: &str) -> String {
        log(text).unwrap_err().to_string()
    }

    #[test]
    fn malformed_row_names_line() {
        let err = log("t_ms,lat_deg,lon_deg\n1,35,-78\n2,abc,-78\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err:?}");
        let err = log("t_ms,lat_deg,lon_deg\n1,35\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn empty_and_bad_header() {
        assert!(matches!(log(""), Err(DataError::Header { .. }) | Err(DataError::Empty)));
        assert!(matches!(log("t_ms,lat_deg,lon_deg\n"), Err(DataError::Empty)));
        assert!(matches!(
            log("time,lat,lon\n1,2,3\n"),
            Err(DataError::Header { .. })
        ));
    }

    fn ts(t: &[i64]) -> Vec<TimedSample<i64>> {
        t.iter().map(|&t_ms| TimedSample { t_ms, pos: t_ms }).collect()
    }

    #[test]
    fn align_exact_match() {
        let pairs = align(&ts(&[1000]), &ts(&[1000]), 0);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].t_ms, 1000);
    }

    #[test]
    fn align_outside_window() {
        assert!(align(&ts(&[1050]), &ts(&[1000]), 10).is_empty());
    }

    #[test]
    fn align_picks_nearest_in_window() {
        let pairs = align(&ts(&[900, 1000, 1100]), &ts(&[995, 2000]), 50);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].uav, 1000);
        assert_eq!(pairs[0].rf, 995);
        assert_eq!(pairs[0].idx, 0);
    }

    #[test]
    fn align_uses_each_uav_sample_once() {
        let pairs = align(&ts(&[1000]), &ts(&[999, 1001]), 5);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].rf, 999);
    }

    fn pairs_with_errors(errors: &[f64]) -> Vec<AlignedPair> {
        errors
            .iter()
            .enumerate()
            .map(|(i, e)| AlignedPair {
                idx: i,
                t_ms: i as i64,
                uav: EnuPoint::new(0.0, 0.0),
                rf: EnuPoint::new(*e, 0.0),
            })
            .collect()
    }

    #[test]
    fn clean_threshold_is_strict() {
        let kept = clean(&pairs_with_errors(&[10.0, 70.0, 59.9]), 60.0).unwrap();
        assert_eq!(kept.iter().map(|p| p.idx).collect::<Vec<_>>(), vec![0, 2]);
        let kept = clean(&pairs_with_errors(&[60.0]), 60.0).unwrap();
        assert_eq!(kept.len(), 1);
        assert!(clean(&pairs_with_errors(&[61.0, 100.0]), 60.0).unwrap().is_empty());
        assert!(matches!(clean(&[], 0.0), Err(DataError::Threshold(_))));
    }

    #[test]
    fn segments_accept_and_exclude() {
        let plan = parse_segments(
            r#"[{"id":"S2","start_idx":11,"end_idx":20,"mm":"CT"},
                {"id":"S1","start_idx":0,"end_idx":10,"mm":"CV","sigmas":{"acc":0.3}}]"#,
            30,
        )
        .unwrap();
        assert_eq!(plan.segments[0].id, "S1");
        assert_eq!(plan.segments[0].sigmas.unwrap().acc, 0.3);
        assert_eq!(plan.excluded(), (21..30).collect::<Vec<_>>());
    }

    #[test]
    fn segments_overlap_names_both() {
        let err = parse_segments(
            r#"[{"id":"A","start_idx":0,"end_idx":10,"mm":"CV"},
                {"id":"B","start_idx":5,"end_idx":15,"mm":"CA"}]"#,
            30,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`A`") && msg.contains("`B`"), "{msg}");
    }

    #[test]
    fn segments_unknown_model() {
        let err =
            parse_segments(r#"[{"id":"S1","start_idx":0,"end_idx":3,"mm":"CJ"}]"#, 10).unwrap_err();
        assert!(matches!(err, DataError::UnknownModel { ref label, .. } if label == "CJ"));
    }

    #[test]
    fn segments_out_of_range() {
        let err =
            parse_segments(r#"[{"id":"S1","start_idx":5,"end_idx":10,"mm":"CV"}]"#, 10).unwrap_err();
        assert!(matches!(err, DataError::SegmentRange { .. }));
        let err =
            parse_segments(r#"[{"id":"S1","start_idx":5,"end_idx":4,"mm":"CV"}]"#, 10).unwrap_err();
        assert!(matches!(err, DataError::SegmentRange { .. }));
    }
}
