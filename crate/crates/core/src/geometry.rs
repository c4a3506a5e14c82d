//! Planar coordinates and the per-day random line.
//!
//! Points are expressed in kilometres relative to a fixed origin (the region
//! centroid). A line is described by its angle `theta` to the x-axis and its
//! vertical offset `alpha` at `x = 0`; claim intensity concentrates around it
//! through [`line_mean`].

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("latitude {0} is at or beyond a pole")]
    Pole(f64),
    #[error("line dispersion sigma_m must be positive, got {0}")]
    NonPositiveDispersion(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PlanarPoint {
    /// km east of the origin
    pub x: f64,
    /// km north of the origin
    pub y: f64,
}

impl PlanarPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PlanarPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Line parameters for one day plus the shared dispersion `sigma_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineState {
    /// Direction in radians, normalised into (-pi/2, pi/2].
    pub theta: f64,
    /// Vertical offset of the line at x = 0, km.
    pub alpha: f64,
    pub sigma_m: f64,
}

impl LineState {
    pub fn new(theta: f64, alpha: f64, sigma_m: f64) -> Result<Self, GeometryError> {
        if !(sigma_m > 0.0) {
            return Err(GeometryError::NonPositiveDispersion(sigma_m));
        }
        Ok(Self {
            theta: normalize_angle(theta),
            alpha,
            sigma_m,
        })
    }
}

/// Maps an angle onto (-pi/2, pi/2]; lines are undirected so the period is pi.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(PI);
    if t > FRAC_PI_2 {
        t -= PI;
    }
    // rem_euclid can return exactly PI for tiny negative inputs
    if t <= -FRAC_PI_2 {
        t += PI;
    }
    t
}

/// Smallest absolute difference between two line angles, modulo pi.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

/// Expresses `s` in the frame whose horizontal axis is the line.
pub fn rotate_to_line(s: PlanarPoint, line: &LineState) -> PlanarPoint {
    let (sin, cos) = line.theta.sin_cos();
    let dy = s.y - line.alpha;
    PlanarPoint {
        x: cos * s.x + sin * dy,
        y: -sin * s.x + cos * dy,
    }
}

/// Signed offset of `s` from the line; its absolute value is the distance.
#[inline]
pub fn signed_offset(s: PlanarPoint, theta: f64, alpha: f64) -> f64 {
    let (sin, cos) = theta.sin_cos();
    (s.y - alpha) * cos - s.x * sin
}

pub fn distance_to_line(s: PlanarPoint, line: &LineState) -> f64 {
    signed_offset(s, line.theta, line.alpha).abs()
}

/// `sigma_m / (1 + d) - 1`, the prior mean of the count field at distance `d`.
#[inline]
pub fn line_mean_at_distance(d: f64, sigma_m: f64) -> f64 {
    sigma_m / (1.0 + d) - 1.0
}

pub fn line_mean(s: PlanarPoint, line: &LineState) -> f64 {
    line_mean_at_distance(distance_to_line(s, line), line.sigma_m)
}

/// Value and partial derivatives of the line mean with respect to
/// `(theta, alpha, sigma_m)`.
///
/// The distance is not differentiable on the line itself; there the one-sided
/// derivative for a positive offset is used.
#[derive(Debug, Clone, Copy)]
pub struct LineMeanGrad {
    pub value: f64,
    pub d_theta: f64,
    pub d_alpha: f64,
    pub d_sigma_m: f64,
}

pub fn line_mean_with_grad(s: PlanarPoint, theta: f64, alpha: f64, sigma_m: f64) -> LineMeanGrad {
    let (sin, cos) = theta.sin_cos();
    let dy = s.y - alpha;
    let g = dy * cos - s.x * sin;
    let d = g.abs();
    let sign = if g < 0.0 { -1.0 } else { 1.0 };
    let inv = 1.0 / (1.0 + d);
    let dm_dd = -sigma_m * inv * inv;
    LineMeanGrad {
        value: sigma_m * inv - 1.0,
        d_theta: dm_dd * sign * (-dy * sin - s.x * cos),
        d_alpha: dm_dd * sign * (-cos),
        d_sigma_m: inv,
    }
}

/// Local equirectangular projection around `(origin_lon, origin_lat)`.
pub fn project_lonlat(
    lon: f64,
    lat: f64,
    origin_lon: f64,
    origin_lat: f64,
) -> Result<PlanarPoint, GeometryError> {
    for v in [lat, origin_lat] {
        if !(v.abs() < 90.0) {
            return Err(GeometryError::Pole(v));
        }
    }
    let k = EARTH_RADIUS_KM * PI / 180.0;
    Ok(PlanarPoint {
        x: k * origin_lat.to_radians().cos() * (lon - origin_lon),
        y: k * (lat - origin_lat),
    })
}

/// Inverse of [`project_lonlat`], returning `(lon, lat)`.
pub fn unproject(p: PlanarPoint, origin_lon: f64, origin_lat: f64) -> (f64, f64) {
    let k = EARTH_RADIUS_KM * PI / 180.0;
    let lat = origin_lat + p.y / k;
    let lon = origin_lon + p.x / (k * origin_lat.to_radians().cos());
    (lon, lat)
}

/// Converts a meteorological wind direction (degrees clockwise from north)
/// into the angle of a line parallel to the flow.
pub fn wind_to_line_angle(wind_dir_deg: f64) -> f64 {
    normalize_angle((90.0 - wind_dir_deg).to_radians())
}
