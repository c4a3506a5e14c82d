//! Claim-count model on the fine grid.
//!
//! Counts follow a zero-inflated negative binomial whose activation
//! probability and mean depend on the CLIMADA count `M`, on the distance to
//! the day's random line through `m_t`, on a latent Matérn field `X` with
//! mean `m_t`, and on a per-day noise `eps` whose standard deviation differs
//! between the hail season (May–August) and April/September.
//!
//! The sampler works on an unconstrained vector: positive scalars on the log
//! scale, the line offset through a logistic map onto its allowed range,
//! and both the field and the noise non-centred (`X = m + L z`,
//! `eps = sd * e`).

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::{is_hail_season, CovariateGrid, GridSpec};
use crate::distributions::{expit, log_expit, zinb_sample, NbShapeTable, ZinbParams};
use crate::geometry::{line_mean, line_mean_with_grad, wind_to_line_angle, LineState, PlanarPoint};
use crate::kernels::{distance_matrix, lower_mul, lower_t_mul, CovarianceMatrix, Kernel, Locations, MaternParams};
use crate::samplers::{nuts_sample, DesignReparam, GradientDensity, LogDensity, NutsConfig, PosteriorSamples, SamplerError};

/// Linear predictor of the log mean is clamped to this magnitude.
pub const ETA_MU_CLAMP: f64 = 30.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum CountModelError {
    #[error("log posterior term `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("no day with a hail signal in the design")]
    NoActiveDays,
    #[error("design mismatch: {0}")]
    Design(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("divergence rate {0:.3} exceeds 10%")]
    FitQuality(f64),
}

/// Prior settings. Coefficients get Normal(0, coef_sd^2), positive scales
/// half-Normal(0, scale_sd^2), the field length scale half-Normal with its
/// own SD, the line angle Normal around the wind-aligned angle and the line
/// offset a uniform law on the grid's vertical extent widened by a margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountPriors {
    pub coef_sd: f64,
    pub scale_sd: f64,
    pub length_scale_sd: f64,
    pub theta_sd_deg: f64,
    pub alpha_margin_km: f64,
}

impl CountPriors {
    pub fn for_cell_size(cell_km: f64) -> Self {
        Self {
            coef_sd: 10.0,
            scale_sd: 5.0,
            length_scale_sd: 5.0 * cell_km,
            theta_sd_deg: 15.0,
            alpha_margin_km: 20.0,
        }
    }
}

/// Scalar parameters of the count model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountScalars {
    pub psi: [f64; 3],
    pub mu0: f64,
    pub mu1: [f64; 3],
    pub mu2: f64,
    /// Negative-binomial shape.
    pub alpha: f64,
    pub sigma_m: f64,
    pub length_scale_mu: f64,
    pub eps_sd_season: f64,
    pub eps_sd_off: f64,
}

impl CountScalars {
    /// Reads the first [`N_SCALARS`] unconstrained coordinates, in the
    /// order of [`SCALAR_NAMES`].
    pub fn from_unconstrained(u: &[f64]) -> Self {
        Self {
            psi: [u[0], u[1], u[2]],
            mu0: u[3],
            mu1: [u[4], u[5], u[6]],
            mu2: u[7],
            alpha: u[8].exp(),
            sigma_m: u[9].exp(),
            length_scale_mu: u[10].exp(),
            eps_sd_season: u[11].exp(),
            eps_sd_off: u[12].exp(),
        }
    }
}

/// Per-day latent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayLatent {
    pub theta: f64,
    pub alpha_offset: f64,
    pub eps: f64,
    /// `X(s, t)` at every cell.
    pub field: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountModelParams {
    pub scalars: CountScalars,
    /// One entry per design day.
    pub days: Vec<DayLatent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDay {
    pub date: chrono::NaiveDate,
    pub hail_season: bool,
    /// Line angle aligned with the day's mean wind, radians.
    pub wind_line_angle: f64,
    /// CLIMADA predicted count per cell.
    pub m_nc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDesign {
    pub cells: Vec<PlanarPoint>,
    pub days: Vec<CountDay>,
    /// Support of the line offset, km.
    pub alpha_range: (f64, f64),
    pub priors: CountPriors,
}

impl CountDesign {
    /// Builds a design from covariates, keeping days with a hail signal.
    /// Returns the design and, for each kept day, its index in `covariates`.
    pub fn from_covariates(grid: &GridSpec, covariates: &CovariateGrid, priors: CountPriors) -> (Self, Vec<usize>) {
        let mut days = Vec::new();
        let mut kept = Vec::new();
        for (t, d) in covariates.days.iter().enumerate() {
            if !d.is_active() {
                continue;
            }
            kept.push(t);
            days.push(CountDay {
                date: d.date,
                hail_season: is_hail_season(d.date),
                wind_line_angle: wind_to_line_angle(d.mean_wind_dir()),
                m_nc: d.climada_count.clone(),
            });
        }
        let (lo, hi) = grid.y_extent();
        let design = Self {
            cells: grid.centroids(),
            days,
            alpha_range: (lo - priors.alpha_margin_km, hi + priors.alpha_margin_km),
            priors,
        };
        (design, kept)
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn dim(&self) -> usize {
        N_SCALARS + self.days.len() * (3 + self.n_cells())
    }

    fn day_offset(&self, t: usize) -> usize {
        N_SCALARS + t * (3 + self.n_cells())
    }

    /// Names of the unconstrained coordinates.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = SCALAR_NAMES.iter().map(|s| s.to_string()).collect();
        for t in 0..self.days.len() {
            names.push(format!("theta[{t}]"));
            names.push(format!("alpha_logit[{t}]"));
            names.push(format!("eps_z[{t}]"));
            for i in 0..self.n_cells() {
                names.push(format!("z[{t},{i}]"));
            }
        }
        names
    }
}

pub const N_SCALARS: usize = 13;

pub const SCALAR_NAMES: [&str; N_SCALARS] = [
    "psi0",
    "psi1",
    "psi2",
    "mu0",
    "mu11",
    "mu12",
    "mu13",
    "mu2",
    "log_alpha",
    "log_sigma_m",
    "log_length_scale_mu",
    "log_eps_sd_season",
    "log_eps_sd_off",
];

/// Linear predictor of the activation probability.
pub fn psi_eta(s: &CountScalars, m_nc: f64, m_t: f64) -> f64 {
    let ind = if m_nc > 0.0 { 1.0 } else { 0.0 };
    s.psi[0] + s.psi[1] * ind + s.psi[2] * m_nc * m_t
}

/// Unclamped linear predictor of the log mean.
pub fn mu_eta(s: &CountScalars, m_nc: f64, m_t: f64, field: f64, eps: f64) -> f64 {
    s.mu0 + s.mu1[0] * m_nc + s.mu1[1] * m_nc * m_nc + s.mu1[2] * m_nc.powi(3) + s.mu2 * m_nc * m_t + field + eps
}

pub fn psi_predictor(cell: usize, day: usize, params: &CountModelParams, design: &CountDesign) -> f64 {
    let m_t = day_line_mean(cell, day, params, design);
    expit(psi_eta(&params.scalars, design.days[day].m_nc[cell], m_t))
}

pub fn mu_predictor(cell: usize, day: usize, params: &CountModelParams, design: &CountDesign) -> f64 {
    let m_t = day_line_mean(cell, day, params, design);
    let d = &params.days[day];
    mu_eta(&params.scalars, design.days[day].m_nc[cell], m_t, d.field[cell], d.eps)
        .clamp(-ETA_MU_CLAMP, ETA_MU_CLAMP)
        .exp()
}

fn day_line_mean(cell: usize, day: usize, params: &CountModelParams, design: &CountDesign) -> f64 {
    let d = &params.days[day];
    let line = LineState {
        theta: d.theta,
        alpha: d.alpha_offset,
        sigma_m: params.scalars.sigma_m,
    };
    line_mean(design.cells[cell], &line)
}

/// The log-posterior split into its parts. `field_prior` is the Gaussian
/// log-density of each day's field under its Matérn prior; the `*_jacobian`
/// entries account for the reparameterisation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LogPostTerms {
    pub likelihood: f64,
    pub field_prior: f64,
    pub field_jacobian: f64,
    pub noise_prior: f64,
    pub noise_jacobian: f64,
    pub line_prior: f64,
    pub line_jacobian: f64,
    pub scalar_prior: f64,
    pub scalar_jacobian: f64,
    /// Cell-days whose log-mean predictor hit the clamp.
    pub clamped: usize,
}

impl LogPostTerms {
    pub fn total(&self) -> f64 {
        self.likelihood
            + self.field_prior
            + self.field_jacobian
            + self.noise_prior
            + self.noise_jacobian
            + self.line_prior
            + self.line_jacobian
            + self.scalar_prior
            + self.scalar_jacobian
    }

    fn check(&self) -> Result<(), CountModelError> {
        for (name, v) in [
            ("likelihood", self.likelihood),
            ("field_prior", self.field_prior),
            ("field_jacobian", self.field_jacobian),
            ("noise_prior", self.noise_prior),
            ("noise_jacobian", self.noise_jacobian),
            ("line_prior", self.line_prior),
            ("line_jacobian", self.line_jacobian),
            ("scalar_prior", self.scalar_prior),
            ("scalar_jacobian", self.scalar_jacobian),
        ] {
            if !v.is_finite() {
                return Err(CountModelError::NonFinite(name));
            }
        }
        Ok(())
    }
}

fn half_normal_log_pdf(x: f64, sd: f64) -> f64 {
    std::f64::consts::LN_2 - sd.ln() - 0.5 * LN_2PI - 0.5 * (x / sd).powi(2)
}

fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    -0.5 * ((x - mean) / sd).powi(2) - sd.ln() - 0.5 * LN_2PI
}

/// Count model posterior over the unconstrained vector.
#[derive(Debug, Clone)]
pub struct CountPosterior {
    pub design: CountDesign,
    /// `counts[t][i]`, parallel to `design.days`.
    pub counts: Vec<Vec<u64>>,
    distances: DMatrix<f64>,
    max_count: u64,
}

impl CountPosterior {
    pub fn new(design: CountDesign, counts: Vec<Vec<u64>>) -> Result<Self, CountModelError> {
        if design.days.is_empty() {
            return Err(CountModelError::NoActiveDays);
        }
        if counts.len() != design.days.len() || counts.iter().any(|c| c.len() != design.n_cells()) {
            return Err(CountModelError::Design("counts do not match the design".into()));
        }
        if design.days.iter().any(|d| d.m_nc.len() != design.n_cells()) {
            return Err(CountModelError::Design("covariates do not match the cells".into()));
        }
        let distances = distance_matrix(Locations::Planar(&design.cells));
        // larger counts fall back to direct lgamma/digamma evaluation
        let max_count = counts.iter().flatten().copied().max().unwrap_or(0).min(4096);
        Ok(Self {
            design,
            counts,
            distances,
            max_count,
        })
    }

    pub fn kernel(length_scale: f64) -> Kernel {
        Kernel::Matern32(MaternParams {
            nu: 1.5,
            length_scale,
        })
    }

    pub fn covariance(&self, length_scale: f64) -> Option<CovarianceMatrix> {
        if !(length_scale > 0.0) || !length_scale.is_finite() {
            return None;
        }
        CovarianceMatrix::from_distances(&self.distances, &Self::kernel(length_scale)).ok()
    }

    pub fn scalars_from(&self, u: &[f64]) -> CountScalars {
        CountScalars::from_unconstrained(u)
    }

    fn alpha_from_logit(&self, a: f64) -> f64 {
        let (lo, hi) = self.design.alpha_range;
        lo + (hi - lo) * expit(a)
    }

    /// Constrained parameters, with fields `X = m + L z`.
    pub fn params_from(&self, u: &[f64]) -> Result<CountModelParams, CountModelError> {
        let s = self.scalars_from(u);
        let cov = self
            .covariance(s.length_scale_mu)
            .ok_or(CountModelError::NonFinite("field_prior"))?;
        let n = self.design.n_cells();
        let days = (0..self.design.days.len())
            .map(|t| {
                let o = self.design.day_offset(t);
                let hs = self.design.days[t].hail_season;
                let sd = if hs { s.eps_sd_season } else { s.eps_sd_off };
                let line = LineState {
                    theta: u[o],
                    alpha: self.alpha_from_logit(u[o + 1]),
                    sigma_m: s.sigma_m,
                };
                let mut field = vec![0.0; n];
                cov.lower_mul(&u[o + 3..o + 3 + n], &mut field);
                for (f, c) in field.iter_mut().zip(&self.design.cells) {
                    *f += line_mean(*c, &line);
                }
                DayLatent {
                    theta: line.theta,
                    alpha_offset: line.alpha,
                    eps: sd * u[o + 2],
                    field,
                }
            })
            .collect();
        Ok(CountModelParams { scalars: s, days })
    }

    /// Inverse of [`params_from`](Self::params_from).
    pub fn unconstrained_from(&self, p: &CountModelParams) -> Result<Vec<f64>, CountModelError> {
        let s = &p.scalars;
        let mut u = vec![
            s.psi[0],
            s.psi[1],
            s.psi[2],
            s.mu0,
            s.mu1[0],
            s.mu1[1],
            s.mu1[2],
            s.mu2,
            s.alpha.ln(),
            s.sigma_m.ln(),
            s.length_scale_mu.ln(),
            s.eps_sd_season.ln(),
            s.eps_sd_off.ln(),
        ];
        let cov = self
            .covariance(s.length_scale_mu)
            .ok_or(CountModelError::NonFinite("field_prior"))?;
        let (lo, hi) = self.design.alpha_range;
        for (t, d) in p.days.iter().enumerate() {
            let hs = self.design.days[t].hail_season;
            let sd = if hs { s.eps_sd_season } else { s.eps_sd_off };
            let r = ((d.alpha_offset - lo) / (hi - lo)).clamp(1e-12, 1.0 - 1e-12);
            u.push(d.theta);
            u.push((r / (1.0 - r)).ln());
            u.push(d.eps / sd);
            let line = LineState {
                theta: d.theta,
                alpha: d.alpha_offset,
                sigma_m: s.sigma_m,
            };
            let diff: Vec<f64> = d
                .field
                .iter()
                .zip(&self.design.cells)
                .map(|(x, c)| x - line_mean(*c, &line))
                .collect();
            u.extend(cov.solve_lower(&diff));
        }
        Ok(u)
    }

    /// Log-posterior terms at `u`.
    pub fn terms(&self, u: &[f64]) -> Result<LogPostTerms, CountModelError> {
        let t = self.evaluate(u, None);
        t.check()?;
        Ok(t)
    }

    fn evaluate(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> LogPostTerms {
        let design = &self.design;
        let pr = &design.priors;
        let n = design.n_cells();
        let s = self.scalars_from(u);
        let mut terms = LogPostTerms::default();
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let Some(cov) = self.covariance(s.length_scale_mu) else {
            terms.field_prior = f64::NEG_INFINITY;
            return terms;
        };
        let lower = cov.cholesky();
        let sum_log_diag: f64 = (0..n).map(|i| lower[(i, i)].ln()).sum();
        let d_lower = grad
            .is_some()
            .then(|| cov.cholesky_length_scale_derivative(&self.distances, &Self::kernel(s.length_scale_mu)));

        // scalar priors
        for &c in &u[..8] {
            terms.scalar_prior += normal_log_pdf(c, 0.0, pr.coef_sd);
        }
        let scales = [
            (8, s.alpha, pr.scale_sd),
            (9, s.sigma_m, pr.scale_sd),
            (10, s.length_scale_mu, pr.length_scale_sd),
            (11, s.eps_sd_season, pr.scale_sd),
            (12, s.eps_sd_off, pr.scale_sd),
        ];
        for &(k, v, sd) in &scales {
            terms.scalar_prior += half_normal_log_pdf(v, sd);
            terms.scalar_jacobian += u[k];
        }
        if let Some(g) = grad.as_deref_mut() {
            for k in 0..8 {
                g[k] = -u[k] / (pr.coef_sd * pr.coef_sd);
            }
            for &(k, v, sd) in &scales {
                g[k] = 1.0 - v * v / (sd * sd);
            }
        }

        let (lo, hi) = design.alpha_range;
        let theta_sd = pr.theta_sd_deg.to_radians();
        let nb_table = NbShapeTable::new(s.alpha, self.max_count);
        let mut d_alpha_nb = 0.0;
        let mut d_sigma_m = 0.0;
        let mut d_length = 0.0;
        let mut m = vec![0.0; n];
        let mut dm = vec![(0.0, 0.0, 0.0); n];
        let mut x = vec![0.0; n];
        let mut g_mu = vec![0.0; n];
        let mut g_m = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for (t, day) in design.days.iter().enumerate() {
            let o = design.day_offset(t);
            let (theta, a, e) = (u[o], u[o + 1], u[o + 2]);
            let z = &u[o + 3..o + 3 + n];
            let alpha_t = lo + (hi - lo) * expit(a);
            let sd_k = if day.hail_season { 11 } else { 12 };
            let sd = u[sd_k].exp();
            let eps = sd * e;

            let zz: f64 = z.iter().map(|v| v * v).sum();
            terms.field_prior += -0.5 * zz - sum_log_diag - 0.5 * n as f64 * LN_2PI;
            terms.field_jacobian += sum_log_diag;
            terms.noise_prior += normal_log_pdf(eps, 0.0, sd);
            terms.noise_jacobian += sd.ln();
            terms.line_prior += normal_log_pdf(theta, day.wind_line_angle, theta_sd) - (hi - lo).ln();
            terms.line_jacobian += (hi - lo).ln() + log_expit(a) + log_expit(-a);

            for i in 0..n {
                let lm = line_mean_with_grad(design.cells[i], theta, alpha_t, s.sigma_m);
                m[i] = lm.value;
                dm[i] = (lm.d_theta, lm.d_alpha, lm.d_sigma_m);
            }
            lower_mul(lower, z, &mut x);
            let counts = &self.counts[t];
            let mut sum_g_mu = 0.0;
            for i in 0..n {
                let mnc = day.m_nc[i];
                let eta_psi = psi_eta(&s, mnc, m[i]);
                let raw = mu_eta(&s, mnc, m[i], m[i] + x[i], eps);
                let clamped = raw.abs() > ETA_MU_CLAMP;
                if clamped {
                    terms.clamped += 1;
                }
                let zg = nb_table.zinb_log_pmf_grad(counts[i], eta_psi, raw.clamp(-ETA_MU_CLAMP, ETA_MU_CLAMP));
                terms.likelihood += zg.value;
                let gp = zg.d_eta_psi;
                let gm = if clamped { 0.0 } else { zg.d_eta_mu };
                g_mu[i] = gm;
                sum_g_mu += gm;
                d_alpha_nb += zg.d_alpha;
                g_m[i] = gp * s.psi[2] * mnc + gm * (s.mu2 * mnc + 1.0);
                if let Some(g) = grad.as_deref_mut() {
                    let ind = if mnc > 0.0 { 1.0 } else { 0.0 };
                    g[0] += gp;
                    g[1] += gp * ind;
                    g[2] += gp * mnc * m[i];
                    g[3] += gm;
                    g[4] += gm * mnc;
                    g[5] += gm * mnc * mnc;
                    g[6] += gm * mnc.powi(3);
                    g[7] += gm * mnc * m[i];
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                let (mut d_theta, mut d_alpha_t) = (0.0, 0.0);
                for i in 0..n {
                    d_theta += g_m[i] * dm[i].0;
                    d_alpha_t += g_m[i] * dm[i].1;
                    d_sigma_m += g_m[i] * dm[i].2;
                }
                let ea = expit(a);
                g[o] = d_theta - (theta - day.wind_line_angle) / (theta_sd * theta_sd);
                g[o + 1] = d_alpha_t * (hi - lo) * ea * (1.0 - ea) + (1.0 - 2.0 * ea);
                g[o + 2] = sd * sum_g_mu - e;
                g[sd_k] += eps * sum_g_mu;
                lower_t_mul(lower, &g_mu, &mut tmp);
                for i in 0..n {
                    g[o + 3 + i] = tmp[i] - z[i];
                }
                if let Some(dl) = &d_lower {
                    lower_mul(dl, z, &mut tmp);
                    d_length += g_mu.iter().zip(&tmp).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            g[8] += d_alpha_nb * s.alpha;
            g[9] += d_sigma_m * s.sigma_m;
            g[10] += d_length * s.length_scale_mu;
        }
        terms
    }
}

impl LogDensity for CountPosterior {
    fn dim(&self) -> usize {
        self.design.dim()
    }

    fn log_density(&self, u: &[f64]) -> f64 {
        let t = self.evaluate(u, None).total();
        if t.is_nan() {
            f64::NEG_INFINITY
        } else {
            t
        }
    }
}

impl GradientDensity for CountPosterior {
    fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let t = self.evaluate(u, Some(grad)).total();
        if t.is_nan() {
            f64::NEG_INFINITY
        } else {
            t
        }
    }
}

/// Full log-posterior in the sampler's parameterisation.
pub fn count_log_posterior(
    params: &CountModelParams,
    design: &CountDesign,
    observed: &[Vec<u64>],
) -> Result<f64, CountModelError> {
    let post = CountPosterior::new(design.clone(), observed.to_vec())?;
    let u = post.unconstrained_from(params)?;
    Ok(post.terms(&u)?.total())
}

/// Starting point: coefficients from crude moments, lines on the wind
/// angle through the grid centre, zero noise and field innovations.
pub fn initial_point(post: &CountPosterior) -> Vec<f64> {
    let d = &post.design;
    let n = d.n_cells();
    let total_cells = (d.days.len() * n) as f64;
    let nonzero: Vec<f64> = post.counts.iter().flatten().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    let frac = ((nonzero.len() as f64 + 0.5) / (total_cells + 1.0)).clamp(0.01, 0.99);
    let mean_pos = if nonzero.is_empty() { 1.0 } else { nonzero.iter().sum::<f64>() / nonzero.len() as f64 };
    let cell_km = if n > 1 {
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| d.cells[i].distance(&d.cells[j]))
            .fold(f64::INFINITY, f64::min)
    } else {
        1.0
    };
    // claims concentrate near the line: start with both line effects
    // positive and each line through the day's count-weighted centroid, which
    // keeps chains away from the mirrored mode where counts grow away from it
    let mut u = vec![
        (frac / (1.0 - frac)).ln(),
        0.0,
        0.5,
        mean_pos.ln(),
        0.0,
        0.0,
        0.0,
        0.5,
        0.0,
        2f64.ln(),
        (2.0 * cell_km).ln(),
        (0.5f64).ln(),
        (0.5f64).ln(),
    ];
    let (lo, hi) = d.alpha_range;
    for (day, counts) in d.days.iter().zip(&post.counts) {
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let alpha_logit = if total > 0.0 {
            let (x, y) = counts.iter().zip(&d.cells).fold((0.0, 0.0), |(x, y), (&c, p)| {
                (x + c as f64 * p.x / total, y + c as f64 * p.y / total)
            });
            let alpha = y - x * day.wind_line_angle.tan();
            let q = ((alpha - lo) / (hi - lo)).clamp(0.02, 0.98);
            (q / (1.0 - q)).ln()
        } else {
            0.0
        };
        u.push(day.wind_line_angle);
        u.push(alpha_logit);
        u.push(0.0);
        u.extend(std::iter::repeat_n(0.0, n));
    }
    u
}

#[derive(Debug, Clone)]
pub struct CountFit {
    pub samples: PosteriorSamples,
    pub posterior: CountPosterior,
}

/// The cell-day design `[1, M, M^2, M^3]` of `(mu0, mu11, mu12, mu13)`;
/// the powers of `M` are nearly collinear, so NUTS runs on QR-orthogonalised
/// coefficients (see [`DesignReparam`]).
fn polynomial_design(post: &CountPosterior) -> DMatrix<f64> {
    let rows: Vec<f64> = post.design.days.iter().flat_map(|d| d.m_nc.iter().copied()).collect();
    DMatrix::from_fn(rows.len(), 4, |i, j| rows[i].powi(j as i32))
}

/// NUTS fit of the count model; chains start from jittered copies of
/// [`initial_point`]. Draws are reported in the model's unconstrained
/// coordinates (see [`CountPosterior::params_from`]).
pub fn fit_counts(
    design: CountDesign,
    counts: Vec<Vec<u64>>,
    config: &NutsConfig,
) -> Result<CountFit, CountModelError> {
    let post = CountPosterior::new(design, counts)?;
    let target = DesignReparam::new(&post, 3, &polynomial_design(&post), post.design.priors.coef_sd);
    // field length scale and the two noise SDs stay at their starting values
    let base = ascend(&target, target.from_model(&initial_point(&post)), 400, &[10, 11, 12]);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed ^ 0xC0u64);
    let inits: Vec<Vec<f64>> = (0..config.n_chains.max(1))
        .map(|_| base.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect())
        .collect();
    let mut samples = nuts_sample(&target, &inits, post.design.parameter_names(), config)?;
    target.samples_to_model(&mut samples);
    if samples.divergence_rate() > 0.1 {
        return Err(CountModelError::FitQuality(samples.divergence_rate()));
    }
    Ok(CountFit { samples, posterior: post })
}

/// Plain Adam ascent used to move the starting point into the main mode
/// before warmup; early warmup steps are large enough to fall into the
/// mirrored mode otherwise. Coordinates in `fixed` keep their values: the
/// joint mode of a hierarchical model sits in degenerate corners of the
/// variance parameters.
fn ascend<D: GradientDensity>(target: &D, mut x: Vec<f64>, iters: usize, fixed: &[usize]) -> Vec<f64> {
    let (b1, b2, lr): (f64, f64, f64) = (0.9, 0.999, 0.02);
    let n = x.len();
    let (mut m, mut v, mut g) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for t in 1..=iters {
        let lp = target.log_density_grad(&x, &mut g);
        if !lp.is_finite() || g.iter().any(|v| !v.is_finite()) {
            break;
        }
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for &i in fixed {
            g[i] = 0.0;
        }
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            x[i] += lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
        }
    }
    x
}

/// Draws a line for a day: angle around the wind-aligned angle, offset
/// uniform on `alpha_range`.
pub fn draw_line<R: Rng + ?Sized>(
    wind_line_angle: f64,
    theta_sd_deg: f64,
    alpha_range: (f64, f64),
    sigma_m: f64,
    rng: &mut R,
) -> LineState {
    let theta = Normal::new(wind_line_angle, theta_sd_deg.to_radians())
        .expect("positive angle sd")
        .sample(rng);
    let alpha = rng.random_range(alpha_range.0..alpha_range.1);
    LineState::new(theta, alpha, sigma_m).expect("positive dispersion")
}

/// One day's latent draws and counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DayDraw {
    /// `X(s, t)`, including the line mean.
    pub field: Vec<f64>,
    pub eps: f64,
    pub counts: Vec<u64>,
}

/// Counts for one day given its line: draws the field and the noise, then a
/// ZINB count per cell.
pub fn draw_day_counts<R: Rng + ?Sized>(
    s: &CountScalars,
    cells: &[PlanarPoint],
    cov: &CovarianceMatrix,
    line: &LineState,
    m_nc: &[f64],
    hail_season: bool,
    rng: &mut R,
) -> DayDraw {
    let mean: Vec<f64> = cells.iter().map(|c| line_mean(*c, line)).collect();
    let field = cov.sample(&mean, rng);
    let sd = if hail_season { s.eps_sd_season } else { s.eps_sd_off };
    let eps = Normal::new(0.0, sd).expect("positive noise sd").sample(rng);
    let counts = (0..cells.len())
        .map(|i| {
            let psi = expit(psi_eta(s, m_nc[i], mean[i]));
            let mu = mu_eta(s, m_nc[i], mean[i], field[i], eps)
                .clamp(-ETA_MU_CLAMP, ETA_MU_CLAMP)
                .exp();
            let p = ZinbParams::new(psi, mu, s.alpha).expect("valid ZINB parameters");
            zinb_sample(&p, rng)
        })
        .collect();
    DayDraw { field, eps, counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{zinb_log_pmf, ZinbParams};
    use chrono::NaiveDate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalars() -> CountScalars {
        CountScalars {
            psi: [-1.0, 1.5, 0.3],
            mu0: 0.2,
            mu1: [0.3, -0.02, 0.001],
            mu2: 0.25,
            alpha: 1.7,
            sigma_m: 3.0,
            length_scale_mu: 3.5,
            eps_sd_season: 0.6,
            eps_sd_off: 0.3,
        }
    }

    fn design(nx: usize, ny: usize, n_days: usize, seed: u64) -> CountDesign {
        let grid = GridSpec { center_lon: 8.6, center_lat: 47.4, cell_km: 2.0, nx, ny };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let days = (0..n_days)
            .map(|t| CountDay {
                date: NaiveDate::from_ymd_opt(2010, if t % 3 == 0 { 9 } else { 6 }, 1 + t as u32 % 28).unwrap(),
                hail_season: t % 3 != 0,
                wind_line_angle: rng.random_range(-1.2..1.2),
                m_nc: (0..nx * ny).map(|_| if rng.random::<f64>() < 0.4 { 0.0 } else { rng.random_range(0..6) as f64 }).collect(),
            })
            .collect();
        let priors = CountPriors::for_cell_size(2.0);
        let (lo, hi) = grid.y_extent();
        CountDesign {
            cells: grid.centroids(),
            days,
            alpha_range: (lo - priors.alpha_margin_km, hi + priors.alpha_margin_km),
            priors,
        }
    }

    fn posterior(seed: u64) -> CountPosterior {
        let d = design(3, 3, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let counts = d
            .days
            .iter()
            .map(|_| (0..9).map(|_| if rng.random::<f64>() < 0.5 { 0 } else { rng.random_range(0..8) }).collect())
            .collect();
        CountPosterior::new(d, counts).unwrap()
    }

    fn random_point(post: &CountPosterior, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut u = initial_point(post);
        for v in u.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
        // keep the length scale away from jitter escalation
        u[10] = rng.random_range(0.0..1.5);
        u
    }

    fn params_with(d: &CountDesign) -> CountModelParams {
        CountModelParams {
            scalars: CountScalars {
                psi: [0.0; 3],
                mu0: 0.0,
                mu1: [0.0; 3],
                mu2: 0.0,
                alpha: 1.0,
                sigma_m: 2.0,
                length_scale_mu: 3.0,
                eps_sd_season: 1.0,
                eps_sd_off: 1.0,
            },
            days: d
                .days
                .iter()
                .map(|_| DayLatent { theta: 0.0, alpha_offset: 0.0, eps: 0.0, field: vec![0.0; d.n_cells()] })
                .collect(),
        }
    }

    #[test]
    fn predictor_examples() {
        let mut d = design(1, 1, 1, 1);
        let mut p = params_with(&d);
        // all zero -> mu = 1, psi = 0.5
        assert!((mu_predictor(0, 0, &p, &d) - 1.0).abs() < 1e-15);
        assert!((psi_predictor(0, 0, &p, &d) - 0.5).abs() < 1e-15);
        p.scalars.mu0 = 2f64.ln();
        assert!((mu_predictor(0, 0, &p, &d) - 2.0).abs() < 1e-14);

        p.scalars.mu0 = 0.0;
        p.scalars.mu1 = [1.0, 0.0, 0.0];
        d.days[0].m_nc = vec![3.0];
        p.days[0].field = vec![0.5];
        p.days[0].eps = -0.5;
        assert!((mu_predictor(0, 0, &p, &d) - 3f64.exp()).abs() < 1e-12);

        // psi = (-2, 1, 0.5), M = 2, m_t = 1 -> expit(0)
        assert_eq!(psi_eta(&CountScalars { psi: [-2.0, 1.0, 0.5], ..scalars() }, 2.0, 1.0), 0.0);
        // no CLIMADA count -> only the intercept remains
        let s = CountScalars { psi: [-0.7, 3.0, 2.0], ..scalars() };
        assert_eq!(psi_eta(&s, 0.0, 5.0), -0.7);
    }

    #[test]
    fn mu_clamp_is_counted() {
        let post = posterior(3);
        let mut u = initial_point(&post);
        u[3] = 40.0;
        let t = post.terms(&u).unwrap();
        assert_eq!(t.clamped, 4 * 9);
        assert!(t.likelihood.is_finite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let post = posterior(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut grad = vec![0.0; post.dim()];
        for _ in 0..10 {
            let u = random_point(&post, &mut rng);
            post.log_density_grad(&u, &mut grad);
            for k in 0..post.dim() {
                let h = 1e-6;
                let mut up = u.clone();
                let mut dn = u.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (post.log_density(&up) - post.log_density(&dn)) / (2.0 * h);
                let err = (fd - grad[k]).abs() / fd.abs().max(1.0);
                assert!(err < 1e-4, "coordinate {k} ({}): fd {fd} analytic {}", post.design.parameter_names()[k], grad[k]);
            }
        }
    }

    #[test]
    fn single_cell_day_matches_hand_composition() {
        let mut d = design(1, 1, 1, 2);
        d.days[0].m_nc = vec![2.0];
        d.days[0].hail_season = true;
        let post = CountPosterior::new(d.clone(), vec![vec![3]]).unwrap();
        let s = scalars();
        let mut p = params_with(&d);
        p.scalars = s;
        p.days[0] = DayLatent { theta: 0.4, alpha_offset: 1.2, eps: 0.3, field: vec![0.8] };
        let u = post.unconstrained_from(&p).unwrap();
        let t = post.terms(&u).unwrap();

        // hand composition, independent of the sampler parameterisation
        let line = LineState { theta: 0.4, alpha: 1.2, sigma_m: s.sigma_m };
        let m = line_mean(d.cells[0], &line);
        let eta_psi = s.psi[0] + s.psi[1] + s.psi[2] * 2.0 * m;
        let eta_mu = s.mu0 + s.mu1[0] * 2.0 + s.mu1[1] * 4.0 + s.mu1[2] * 8.0 + s.mu2 * 2.0 * m + 0.8 + 0.3;
        let lik = zinb_log_pmf(3.0, &ZinbParams::new(expit(eta_psi), eta_mu.exp(), s.alpha).unwrap()).unwrap();
        // one cell: the Matérn prior is N(m, 1 + jitter)
        let var = post.covariance(s.length_scale_mu).unwrap().entries()[(0, 0)];
        let field = -0.5 * (0.8 - m).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let noise = -0.5 * (0.3f64 / 0.6).powi(2) - (0.6f64 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((t.likelihood - lik).abs() < 1e-10);
        assert!((t.field_prior - field).abs() < 1e-10);
        assert!((t.noise_prior - noise).abs() < 1e-10);
    }

    #[test]
    fn no_claims_and_vanishing_activation() {
        let d = design(2, 2, 3, 9);
        let post = CountPosterior::new(d.clone(), vec![vec![0; 4]; 3]).unwrap();
        let mut u = initial_point(&post);
        u[0] = -40.0;
        u[1] = 0.0;
        u[2] = 0.0;
        let t = post.terms(&u).unwrap();
        assert!(t.likelihood.abs() < 1e-12 * 12.0 + 1e-15);
    }

    #[test]
    fn field_mean_is_the_line_mean() {
        let d = design(3, 2, 5, 12);
        let post = CountPosterior::new(d.clone(), vec![vec![0; 6]; 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut u = random_point(&post, &mut rng);
        for t in 0..5 {
            let o = d.day_offset(t);
            u[o + 3..o + 9].iter_mut().for_each(|v| *v = 0.0);
        }
        let p = post.params_from(&u).unwrap();
        for (t, day) in p.days.iter().enumerate() {
            let line = LineState { theta: day.theta, alpha: day.alpha_offset, sigma_m: p.scalars.sigma_m };
            for i in 0..6 {
                assert_eq!(day.field[i], line_mean(d.cells[i], &line), "day {t} cell {i}");
            }
        }
        let back = post.unconstrained_from(&p).unwrap();
        for (a, b) in back.iter().zip(&u) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_variance_follows_the_month() {
        let d = design(1, 1, 2, 4);
        assert!(!d.days[0].hail_season && d.days[1].hail_season);
        let post = CountPosterior::new(d.clone(), vec![vec![0]; 2]).unwrap();
        let mut p = params_with(&d);
        p.scalars.eps_sd_season = 2.0;
        p.scalars.eps_sd_off = 0.5;
        p.days[0].eps = 0.4;
        p.days[1].eps = 0.4;
        let u = post.unconstrained_from(&p).unwrap();
        let t = post.terms(&u).unwrap();
        let expected = normal_log_pdf(0.4, 0.0, 0.5) + normal_log_pdf(0.4, 0.0, 2.0);
        assert!((t.noise_prior - expected).abs() < 1e-12);
        assert!((t.noise_jacobian - (0.5f64.ln() + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn predictors_stay_in_range() {
        let post = posterior(21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let mut u = random_point(&post, &mut rng);
            for v in u.iter_mut().take(8) {
                *v *= 20.0;
            }
            let p = post.params_from(&u).unwrap();
            for t in 0..p.days.len() {
                for i in 0..9 {
                    let psi = psi_predictor(i, t, &p, &post.design);
                    let mu = mu_predictor(i, t, &p, &post.design);
                    assert!((0.0..=1.0).contains(&psi));
                    assert!(mu > 0.0 && mu.is_finite());
                }
            }
        }
    }

    #[test]
    fn latent_mixture_mean_matches_monte_carlo() {
        // one cell, psi -> 1: E[N] = E[exp(eta + X + eps)] with X ~ N(m, 1+j), eps ~ N(0, sd^2)
        let s = CountScalars { psi: [40.0, 0.0, 0.0], mu0: 0.1, mu1: [0.0; 3], mu2: 0.0, alpha: 2.0, sigma_m: 2.0, length_scale_mu: 2.0, eps_sd_season: 0.4, eps_sd_off: 0.4 };
        let cells = [PlanarPoint::new(0.0, 0.0)];
        let line = LineState::new(0.3, 1.0, s.sigma_m).unwrap();
        let cov = CovarianceMatrix::from_distances(&DMatrix::zeros(1, 1), &CountPosterior::kernel(2.0)).unwrap();
        let m = line_mean(cells[0], &line);
        let var = cov.entries()[(0, 0)] + 0.16;
        let analytic = (s.mu0 + m + 0.5 * var).exp();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let draws: Vec<f64> = (0..200_000)
            .map(|_| draw_day_counts(&s, &cells, &cov, &line, &[0.0], true, &mut rng).counts[0] as f64)
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sdv = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
        let se = sdv / (draws.len() as f64).sqrt();
        assert!((mean - analytic).abs() < 3.0 * se, "{mean} vs {analytic} (se {se})");
    }

    #[test]
    fn design_drops_quiet_days() {
        use crate::data_io::CovariateDay;
        let grid = GridSpec { center_lon: 8.6, center_lat: 47.4, cell_km: 2.0, nx: 2, ny: 2 };
        let mk = |d: u32| CovariateDay::zeros(NaiveDate::from_ymd_opt(2010, 6, d).unwrap(), 4);
        let mut active = mk(2);
        active.poh[1] = 0.4;
        let cov = CovariateGrid { nx: 2, ny: 2, days: vec![mk(1), active, mk(3)] };
        let (design, kept) = CountDesign::from_covariates(&grid, &cov, CountPriors::for_cell_size(2.0));
        assert_eq!(kept, vec![1]);
        assert_eq!(design.days.len(), 1);
        assert_eq!(design.alpha_range, (-22.0, 22.0));
    }

    #[test]
    fn polynomial_reparameterisation_preserves_the_density() {
        let post = posterior(31);
        let target = DesignReparam::new(&post, 3, &polynomial_design(&post), post.design.priors.coef_sd);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let u = random_point(&post, &mut rng);
        let v = target.from_model(&u);
        for (a, b) in target.to_model(&v).iter().zip(&u) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((target.log_density(&v) - post.log_density(&u)).abs() < 1e-9);
        let mut g = vec![0.0; post.dim()];
        target.log_density_grad(&v, &mut g);
        for k in 3..7 {
            let h = 1e-6;
            let (mut up, mut dn) = (v.clone(), v.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (target.log_density(&up) - target.log_density(&dn)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-4 * fd.abs().max(1.0));
        }
    }
}
