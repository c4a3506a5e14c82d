//! Correlation kernels, chordal distance and Gaussian-field covariances.

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PlanarPoint, EARTH_RADIUS_KM};

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("distance must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("length scale must be positive, got {0}")]
    NonPositiveLengthScale(f64),
    #[error("at least one location is required")]
    Empty,
    #[error("covariance is singular even with jitter {0:e}")]
    Singular(f64),
}

/// Matérn correlation with smoothness fixed at 1.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub nu: f64,
    pub length_scale: f64,
}

impl MaternParams {
    pub fn new(length_scale: f64) -> Result<Self, KernelError> {
        if !(length_scale > 0.0) {
            return Err(KernelError::NonPositiveLengthScale(length_scale));
        }
        Ok(Self {
            nu: 1.5,
            length_scale,
        })
    }
}

/// `(1 + w / (4 l^2))^-2`.
///
/// `squared_distance` switches the numerator from `w` to `w^2`; the default
/// uses `w` as the kernel is usually written.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RationalQuadParams {
    pub length_scale: f64,
    #[serde(default)]
    pub squared_distance: bool,
}

impl RationalQuadParams {
    pub fn new(length_scale: f64) -> Result<Self, KernelError> {
        if !(length_scale > 0.0) {
            return Err(KernelError::NonPositiveLengthScale(length_scale));
        }
        Ok(Self {
            length_scale,
            squared_distance: false,
        })
    }
}

fn check(w: f64, l: f64) -> Result<(), KernelError> {
    if !(w >= 0.0) {
        return Err(KernelError::NegativeDistance(w));
    }
    if !(l > 0.0) {
        return Err(KernelError::NonPositiveLengthScale(l));
    }
    Ok(())
}

pub fn matern32(w: f64, p: &MaternParams) -> Result<f64, KernelError> {
    check(w, p.length_scale)?;
    Ok(Kernel::Matern32(*p).correlation(w))
}

pub fn rational_quadratic(w: f64, p: &RationalQuadParams) -> Result<f64, KernelError> {
    check(w, p.length_scale)?;
    Ok(Kernel::RationalQuadratic(*p).correlation(w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Matern32(MaternParams),
    RationalQuadratic(RationalQuadParams),
}

impl Kernel {
    pub fn length_scale(&self) -> f64 {
        match self {
            Kernel::Matern32(p) => p.length_scale,
            Kernel::RationalQuadratic(p) => p.length_scale,
        }
    }

    /// Same kernel family with another length scale.
    pub fn with_length_scale(&self, l: f64) -> Kernel {
        match *self {
            Kernel::Matern32(p) => Kernel::Matern32(MaternParams {
                length_scale: l,
                ..p
            }),
            Kernel::RationalQuadratic(p) => Kernel::RationalQuadratic(RationalQuadParams {
                length_scale: l,
                ..p
            }),
        }
    }

    /// Correlation at distance `w`; inputs are assumed valid.
    #[inline]
    pub fn correlation(&self, w: f64) -> f64 {
        match self {
            Kernel::Matern32(p) => {
                let a = 3f64.sqrt() * w / p.length_scale;
                (1.0 + a) * (-a).exp()
            }
            Kernel::RationalQuadratic(p) => {
                let q = rq_ratio(w, p);
                (1.0 + q).powi(-2)
            }
        }
    }

    /// Derivative of the correlation with respect to the length scale.
    #[inline]
    pub fn d_length_scale(&self, w: f64) -> f64 {
        match self {
            Kernel::Matern32(p) => {
                let l = p.length_scale;
                let a = 3f64.sqrt() * w / l;
                a * a * (-a).exp() / l
            }
            Kernel::RationalQuadratic(p) => {
                let q = rq_ratio(w, p);
                4.0 * q * (1.0 + q).powi(-3) / p.length_scale
            }
        }
    }
}

#[inline]
fn rq_ratio(w: f64, p: &RationalQuadParams) -> f64 {
    let num = if p.squared_distance { w * w } else { w };
    num / (4.0 * p.length_scale * p.length_scale)
}

/// Straight-line distance through the Earth between two `(lon, lat)` points
/// in degrees, in km: `2 r sqrt(h)` with `h` the haversine term.
pub fn chordal_distance(s1: (f64, f64), s2: (f64, f64)) -> f64 {
    // 1 - cos z written as 2 sin^2(z / 2), which keeps precision for close points
    let half_sin_sq = |z: f64| (0.5 * z.to_radians()).sin().powi(2);
    let cos_p = |z: f64| z.to_radians().cos();
    let (x1, y1) = s1;
    let (x2, y2) = s2;
    let h = half_sin_sq(y2 - y1) + cos_p(y1) * cos_p(y2) * half_sin_sq(x2 - x1);
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub enum Locations<'a> {
    Planar(&'a [PlanarPoint]),
    /// `(lon, lat)` in degrees, compared by chordal distance.
    LonLat(&'a [(f64, f64)]),
}

impl Locations<'_> {
    pub fn len(&self) -> usize {
        match self {
            Locations::Planar(p) => p.len(),
            Locations::LonLat(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn distance_matrix(locations: Locations<'_>) -> DMatrix<f64> {
    let n = locations.len();
    DMatrix::from_fn(n, n, |i, j| match locations {
        Locations::Planar(p) => p[i].distance(&p[j]),
        Locations::LonLat(p) => chordal_distance(p[i], p[j]),
    })
}

/// Kernel matrix over a fixed set of locations with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
    jitter: f64,
    lower: DMatrix<f64>,
}

pub fn build_covariance(
    locations: Locations<'_>,
    kernel: &Kernel,
) -> Result<CovarianceMatrix, KernelError> {
    if locations.is_empty() {
        return Err(KernelError::Empty);
    }
    CovarianceMatrix::from_distances(&distance_matrix(locations), kernel)
}

impl CovarianceMatrix {
    pub fn from_distances(
        distances: &DMatrix<f64>,
        kernel: &Kernel,
    ) -> Result<Self, KernelError> {
        let n = distances.nrows();
        if n == 0 {
            return Err(KernelError::Empty);
        }
        if !(kernel.length_scale() > 0.0) {
            return Err(KernelError::NonPositiveLengthScale(kernel.length_scale()));
        }
        let base = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else {
                kernel.correlation(distances[(i, j)])
            }
        });
        let mut jitter = JITTER_START;
        loop {
            let mut entries = base.clone();
            for i in 0..n {
                entries[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(entries.clone()) {
                let lower = chol.l();
                if (0..n).all(|i| lower[(i, i)] > 0.0) {
                    return Ok(Self {
                        entries,
                        jitter,
                        lower,
                    });
                }
            }
            jitter *= 10.0;
            if jitter > JITTER_MAX * 1.0001 {
                return Err(KernelError::Singular(jitter / 10.0));
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn min_pivot(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.lower[(i, i)])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.lower[(i, i)].ln()).sum::<f64>()
    }

    /// `out = L z`
    pub fn lower_mul(&self, z: &[f64], out: &mut [f64]) {
        lower_mul(&self.lower, z, out);
    }

    /// Solves `L y = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = b[i];
            for j in 0..i {
                acc -= self.lower[(i, j)] * y[j];
            }
            y[i] = acc / self.lower[(i, i)];
        }
        y
    }

    /// Log density of `x` under N(mean, K).
    pub fn gaussian_log_density(&self, x: &[f64], mean: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        let w = self.solve_lower(&diff);
        let n = self.dim() as f64;
        -0.5 * w.iter().map(|v| v * v).sum::<f64>()
            - 0.5 * self.log_det()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Draws `mean + L z` with `z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = vec![0.0; self.dim()];
        self.lower_mul(&z, &mut out);
        for (o, m) in out.iter_mut().zip(mean) {
            *o += m;
        }
        out
    }

    /// Derivative of the Cholesky factor with respect to the kernel length
    /// scale, holding the jitter fixed.
    pub fn cholesky_length_scale_derivative(
        &self,
        distances: &DMatrix<f64>,
        kernel: &Kernel,
    ) -> DMatrix<f64> {
        let n = self.dim();
        let dk = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                kernel.d_length_scale(distances[(i, j)])
            }
        });
        cholesky_derivative(&self.lower, &dk)
    }
}

/// `out = L z` for a lower-triangular `L`.
#[inline]
pub fn lower_mul(lower: &DMatrix<f64>, z: &[f64], out: &mut [f64]) {
    let n = lower.nrows();
    for (i, o) in out.iter_mut().enumerate().take(n) {
        let mut acc = 0.0;
        for (j, zj) in z.iter().enumerate().take(i + 1) {
            acc += lower[(i, j)] * zj;
        }
        *o = acc;
    }
}

/// `out = L^T v` for a lower-triangular `L`.
#[inline]
pub fn lower_t_mul(lower: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    let n = lower.nrows();
    for (j, o) in out.iter_mut().enumerate().take(n) {
        let mut acc = 0.0;
        for (i, vi) in v.iter().enumerate().skip(j) {
            acc += lower[(i, j)] * vi;
        }
        *o = acc;
    }
}

/// Forward-mode derivative of the Cholesky factor: `dL = L Phi(L^-1 dK L^-T)`
/// where `Phi` keeps the strict lower triangle and halves the diagonal.
pub fn cholesky_derivative(lower: &DMatrix<f64>, dk: &DMatrix<f64>) -> DMatrix<f64> {
    let n = lower.nrows();
    let linv = lower
        .clone()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("cholesky factor has positive diagonal");
    let mut inner = &linv * dk * linv.transpose();
    for i in 0..n {
        for j in 0..n {
            if j > i {
                inner[(i, j)] = 0.0;
            } else if i == j {
                inner[(i, j)] *= 0.5;
            }
        }
    }
    lower * inner
}
