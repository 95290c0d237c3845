//! WGS-84 geodetic coordinates and a local east/north tangent plane.
//!
//! Points are projected through ECEF onto the tangent plane of an origin,
//! altitude fixed at zero. The up component is dropped, so the projection
//! is only meant for the few-kilometre extent of a sensor deployment.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS-84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;

const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("latitude {0} deg is outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} deg is outside [-180, 180]")]
    Longitude(f64),
}

/// Geodetic position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self, GeoError> {
        let p = GeoPoint { lat_deg, lon_deg };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(-90.0..=90.0).contains(&self.lat_deg) {
            return Err(GeoError::Latitude(self.lat_deg));
        }
        if !(-180.0..=180.0).contains(&self.lon_deg) {
            return Err(GeoError::Longitude(self.lon_deg));
        }
        Ok(())
    }
}

/// Local planar position in metres: `x` east, `y` north.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuPoint {
    pub x: f64,
    pub y: f64,
}

impl EnuPoint {
    pub const ORIGIN: EnuPoint = EnuPoint { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        EnuPoint { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: &EnuPoint) -> f64 {
        (*self - *other).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for EnuPoint {
    type Output = EnuPoint;
    fn add(self, rhs: EnuPoint) -> EnuPoint {
        EnuPoint::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for EnuPoint {
    type Output = EnuPoint;
    fn sub(self, rhs: EnuPoint) -> EnuPoint {
        EnuPoint::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Neg for EnuPoint {
    type Output = EnuPoint;
    fn neg(self) -> EnuPoint {
        EnuPoint::new(-self.x, -self.y)
    }
}

impl Mul<f64> for EnuPoint {
    type Output = EnuPoint;
    fn mul(self, k: f64) -> EnuPoint {
        EnuPoint::new(self.x * k, self.y * k)
    }
}

fn geodetic_to_ecef(lat: f64, lon: f64, h: f64) -> [f64; 3] {
    let (slat, clat) = lat.sin_cos();
    let (slon, clon) = lon.sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
    [
        (n + h) * clat * clon,
        (n + h) * clat * slon,
        (n * (1.0 - WGS84_E2) + h) * slat,
    ]
}

/// ECEF to (lat rad, lon rad, height m), fixed-point iteration on latitude.
fn ecef_to_geodetic(p: [f64; 3]) -> (f64, f64, f64) {
    let [x, y, z] = p;
    let lon = y.atan2(x);
    let r = x.hypot(y);
    let mut lat = z.atan2(r * (1.0 - WGS84_E2));
    let mut h = 0.0;
    for _ in 0..10 {
        let slat = lat.sin();
        let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
        h = r / lat.cos() - n;
        let next = z.atan2(r * (1.0 - WGS84_E2 * n / (n + h)));
        let done = (next - lat).abs() < 1e-15;
        lat = next;
        if done {
            break;
        }
    }
    (lat, lon, h)
}

/// Rows of the ECEF→ENU rotation at the origin: east, north, up.
fn enu_basis(origin: &GeoPoint) -> [[f64; 3]; 3] {
    let (slat, clat) = origin.lat_deg.to_radians().sin_cos();
    let (slon, clon) = origin.lon_deg.to_radians().sin_cos();
    [
        [-slon, clon, 0.0],
        [-slat * clon, -slat * slon, clat],
        [clat * clon, clat * slon, slat],
    ]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// East/north offsets of `p` relative to `origin`.
pub fn to_enu(p: &GeoPoint, origin: &GeoPoint) -> Result<EnuPoint, GeoError> {
    p.validate()?;
    origin.validate()?;
    let a = geodetic_to_ecef(p.lat_deg.to_radians(), p.lon_deg.to_radians(), 0.0);
    let o = geodetic_to_ecef(origin.lat_deg.to_radians(), origin.lon_deg.to_radians(), 0.0);
    let d = [a[0] - o[0], a[1] - o[1], a[2] - o[2]];
    let [e, n, _] = enu_basis(origin);
    Ok(EnuPoint::new(dot(&e, &d), dot(&n, &d)))
}

/// Inverse of [`to_enu`] at the same origin.
///
/// The dropped up component is recovered by sliding along the origin's up
/// axis until the point lies on the ellipsoid surface.
pub fn from_enu(p: &EnuPoint, origin: &GeoPoint) -> Result<GeoPoint, GeoError> {
    origin.validate()?;
    let o = geodetic_to_ecef(origin.lat_deg.to_radians(), origin.lon_deg.to_radians(), 0.0);
    let [e, n, u] = enu_basis(origin);
    let mut up = 0.0;
    let mut lat = origin.lat_deg.to_radians();
    let mut lon = origin.lon_deg.to_radians();
    for _ in 0..20 {
        let ecef = [
            o[0] + e[0] * p.x + n[0] * p.y + u[0] * up,
            o[1] + e[1] * p.x + n[1] * p.y + u[1] * up,
            o[2] + e[2] * p.x + n[2] * p.y + u[2] * up,
        ];
        let (la, lo, h) = ecef_to_geodetic(ecef);
        lat = la;
        lon = lo;
        // The up axis is within a fraction of a degree of the local normal,
        // so subtracting h converges in a couple of steps.
        up -= h;
        if h.abs() < 1e-10 {
            break;
        }
    }
    GeoPoint::new(lat.to_degrees(), lon.to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const ORIGIN: GeoPoint = GeoPoint {
        lat_deg: 35.8,
        lon_deg: -78.7,
    };

    #[test]
    fn origin_maps_to_zero() {
        let p = to_enu(&ORIGIN, &ORIGIN).unwrap();
        assert_eq!(p, EnuPoint::ORIGIN);
        let g = from_enu(&EnuPoint::ORIGIN, &ORIGIN).unwrap();
        assert_abs_diff_eq!(g.lat_deg, 35.8, epsilon = 1e-12);
        assert_abs_diff_eq!(g.lon_deg, -78.7, epsilon = 1e-12);
    }

    // Frozen from an independent numpy evaluation of the WGS-84 ECEF/ENU chain.
    const NORTH_OFFSET_M: f64 = 110.955_306_735_113_94;

    #[test]
    fn one_millidegree_north() {
        let p = to_enu(&GeoPoint::new(35.801, -78.7).unwrap(), &ORIGIN).unwrap();
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.y, NORTH_OFFSET_M, epsilon = 1e-6);
    }

    #[test]
    fn one_millidegree_east() {
        // numpy oracle: (90.39079764214576, 0.00046141971293778283)
        let p = to_enu(&GeoPoint::new(35.8, -78.699).unwrap(), &ORIGIN).unwrap();
        assert_abs_diff_eq!(p.x, 90.390_797_642_145_76, epsilon = 1e-6);
        assert_abs_diff_eq!(p.y, 0.000_461_419_712_937_78, epsilon = 1e-6);
    }

    #[test]
    fn inverse_of_north_offset() {
        let g = from_enu(&EnuPoint::new(0.0, NORTH_OFFSET_M), &ORIGIN).unwrap();
        assert_abs_diff_eq!(g.lat_deg, 35.801, epsilon = 1e-9);
        assert_abs_diff_eq!(g.lon_deg, -78.7, epsilon = 1e-9);
    }

    #[test]
    fn antisymmetry_for_nearby_points() {
        let a = GeoPoint::new(35.8006, -78.7004).unwrap();
        let b = GeoPoint::new(35.8000, -78.7000).unwrap();
        let ab = to_enu(&a, &b).unwrap();
        let ba = to_enu(&b, &a).unwrap();
        assert!(ab.norm() > 50.0 && ab.norm() < 150.0);
        assert_abs_diff_eq!(ab.x, -ba.x, epsilon = 1e-3);
        assert_abs_diff_eq!(ab.y, -ba.y, epsilon = 1e-3);
    }

    #[test]
    fn rejects_out_of_range() {
        assert_eq!(GeoPoint::new(91.0, 0.0), Err(GeoError::Latitude(91.0)));
        assert_eq!(GeoPoint::new(0.0, 180.5), Err(GeoError::Longitude(180.5)));
        let bad = GeoPoint {
            lat_deg: -90.5,
            lon_deg: 0.0,
        };
        assert!(to_enu(&bad, &ORIGIN).is_err());
        assert!(to_enu(&ORIGIN, &bad).is_err());
    }
}
