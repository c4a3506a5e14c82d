//! Residual claim values `Z = Y - M^YC` on the coarse grid.
//!
//! Three independent parts: a logistic model for `f(Z) > u` with cell and
//! season random effects, a Beta body for `Z / f^-1(u)` below the threshold
//! and a GPD tail for `f(Z) - u` above it. `f(x) = log(1 + x)`.

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::is_hail_season;
use crate::distributions::{
    beta_cdf, beta_log_pdf_grad, beta_sample, expit, f_inverse, gpd_exceedance_cdf,
    gpd_exceedance_quantile, gpd_log_pdf_grad, log_expit, normal_log_pdf, BetaMeanPrecision,
};
use crate::kernels::{
    chordal_distance, distance_matrix, lower_mul, lower_t_mul, CovarianceMatrix, Kernel, Locations,
    MaternParams, RationalQuadParams,
};
use crate::samplers::{
    DesignReparam,
    demc_snooker_sample, nuts_sample, DemcConfig, GradientDensity, LogDensity, NutsConfig,
    PosteriorSamples, SamplerError,
};
use crate::threshold::fit_gpd_ml;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum ValueModelError {
    #[error("no claim exceeds the threshold; the tail model cannot be fitted")]
    NoExceedances,
    #[error("no claim lies below the threshold; the body model cannot be fitted")]
    NoBodyClaims,
    #[error("residual {0} is not positive")]
    NonPositiveResidual(f64),
    #[error("design mismatch: {0}")]
    Design(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("divergence rate {0:.3} exceeds 10%")]
    FitQuality(f64),
}

/// One modelled claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueClaim {
    pub date: NaiveDate,
    /// Coarse cell index.
    pub cell: usize,
    pub poh: f64,
    pub meshs: f64,
    pub exposure: f64,
    /// Residual `Y - M^YC`, strictly positive.
    pub z: f64,
}

/// Covariates a claim value depends on, without the response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaimContext {
    pub date: NaiveDate,
    pub cell: usize,
    pub poh: f64,
    pub meshs: f64,
    pub exposure: f64,
}

impl From<&ValueClaim> for ClaimContext {
    fn from(c: &ValueClaim) -> Self {
        Self {
            date: c.date,
            cell: c.cell,
            poh: c.poh,
            meshs: c.meshs,
            exposure: c.exposure,
        }
    }
}

/// Centering and scaling of POH, MESHS, MESHS·POH and exposure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 4],
    pub sd: [f64; 4],
}

impl Standardizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 4],
            sd: [1.0; 4],
        }
    }

    pub fn fit(contexts: &[ClaimContext]) -> Self {
        let n = contexts.len().max(1) as f64;
        let mut mean = [0.0; 4];
        let mut sd = [0.0; 4];
        for c in contexts {
            for (m, v) in mean.iter_mut().zip(raw_features(c)) {
                *m += v / n;
            }
        }
        for c in contexts {
            for k in 0..4 {
                sd[k] += (raw_features(c)[k] - mean[k]).powi(2) / n;
            }
        }
        for s in sd.iter_mut() {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        Self { mean, sd }
    }

    /// `[POH, MESHS, MESHS·POH, exposure]` after standardisation.
    pub fn features(&self, c: &ClaimContext) -> [f64; 4] {
        let raw = raw_features(c);
        std::array::from_fn(|k| (raw[k] - self.mean[k]) / self.sd[k])
    }
}

fn raw_features(c: &ClaimContext) -> [f64; 4] {
    [c.poh, c.meshs, c.meshs * c.poh, c.exposure]
}

/// Exceedance-model season: the April–June or July–September half of a year.
pub fn season_half(date: NaiveDate) -> (i32, u8) {
    (date.year(), if date.month() <= 6 { 0 } else { 1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValuePriors {
    pub coef_sd: f64,
    /// Half-normal SD of random-effect standard deviations.
    pub scale_sd: f64,
    /// Half-normal SD of the Beta precision.
    pub kappa_sd: f64,
    /// Normal SD of the GPD shapes.
    pub xi_sd: f64,
    /// Half-normal SD of both field length scales, km.
    pub length_scale_sd: f64,
}

impl Default for ValuePriors {
    fn default() -> Self {
        Self {
            coef_sd: 10.0,
            scale_sd: 5.0,
            kappa_sd: 100.0,
            xi_sd: 1.0,
            length_scale_sd: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueDesign {
    /// Coarse cell centroids, `(lon, lat)` degrees.
    pub cells: Vec<(f64, f64)>,
    pub claims: Vec<ValueClaim>,
    pub threshold_u: f64,
    pub standardizer: Standardizer,
    /// Distinct season halves of the claims, sorted.
    pub seasons: Vec<(i32, u8)>,
    pub priors: ValuePriors,
}

impl ValueDesign {
    pub fn new(
        cells: Vec<(f64, f64)>,
        claims: Vec<ValueClaim>,
        threshold_u: f64,
        standardize: bool,
        priors: ValuePriors,
    ) -> Result<Self, ValueModelError> {
        if let Some(c) = claims.iter().find(|c| !(c.z > 0.0)) {
            return Err(ValueModelError::NonPositiveResidual(c.z));
        }
        if let Some(c) = claims.iter().find(|c| c.cell >= cells.len()) {
            return Err(ValueModelError::Design(format!("claim in unknown coarse cell {}", c.cell)));
        }
        let contexts: Vec<ClaimContext> = claims.iter().map(ClaimContext::from).collect();
        let standardizer = if standardize {
            Standardizer::fit(&contexts)
        } else {
            Standardizer::identity()
        };
        let mut seasons: Vec<(i32, u8)> = claims.iter().map(|c| season_half(c.date)).collect();
        seasons.sort_unstable();
        seasons.dedup();
        Ok(Self {
            cells,
            claims,
            threshold_u,
            standardizer,
            seasons,
            priors,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn boundary(&self) -> f64 {
        f_inverse(self.threshold_u)
    }

    pub fn is_exceedance(&self, z: f64) -> bool {
        z.ln_1p() > self.threshold_u
    }

    pub fn cell_counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.n_cells()];
        for c in &self.claims {
            n[c.cell] += 1;
        }
        n
    }

    fn distances(&self) -> DMatrix<f64> {
        distance_matrix(Locations::LonLat(&self.cells))
    }
}

fn half_normal_log_pdf(x: f64, sd: f64) -> f64 {
    std::f64::consts::LN_2 + normal_log_pdf(x, 0.0, sd)
}

fn std_normal_sum(z: &[f64]) -> f64 {
    z.iter().map(|v| -0.5 * v * v - 0.5 * LN_2PI).sum()
}

/// Log-prior (with log-scale Jacobian) of a half-normal scale stored as
/// `v = log(s)`, and its derivative in `v`.
fn log_scale_prior(v: f64, sd: f64) -> (f64, f64) {
    let s = v.exp();
    (half_normal_log_pdf(s, sd) + v, 1.0 - s * s / (sd * sd))
}

// ---------------------------------------------------------------------------
// exceedance indicator

pub const EXCEEDANCE_SCALARS: [&str; 7] = ["p0", "p1", "p2", "p3", "p4", "log_chi_sd", "log_eps_p_sd"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceParams {
    pub p: [f64; 5],
    pub chi: Vec<f64>,
    pub chi_sd: f64,
    pub eps_p: Vec<f64>,
    pub eps_p_sd: f64,
}

struct ExceedanceRow {
    x: [f64; 4],
    cell: usize,
    season: usize,
    r: bool,
}

pub struct ExceedancePosterior {
    pub design: ValueDesign,
    rows: Vec<ExceedanceRow>,
}

impl ExceedancePosterior {
    pub fn new(design: ValueDesign) -> Self {
        let rows = design
            .claims
            .iter()
            .map(|c| ExceedanceRow {
                x: design.standardizer.features(&c.into()),
                cell: c.cell,
                season: design.seasons.binary_search(&season_half(c.date)).expect("season indexed"),
                r: design.is_exceedance(c.z),
            })
            .collect();
        Self { design, rows }
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = EXCEEDANCE_SCALARS.iter().map(|s| s.to_string()).collect();
        names.extend((0..self.design.n_cells()).map(|i| format!("chi[{i}]")));
        names.extend((0..self.design.seasons.len()).map(|i| format!("eps_p[{i}]")));
        names
    }

    pub fn params_from(&self, u: &[f64]) -> ExceedanceParams {
        let c = self.design.n_cells();
        let chi_sd = u[5].exp();
        let eps_p_sd = u[6].exp();
        ExceedanceParams {
            p: [u[0], u[1], u[2], u[3], u[4]],
            chi: u[7..7 + c].to_vec(),
            chi_sd,
            eps_p: u[7 + c..].to_vec(),
            eps_p_sd,
        }
    }

    fn initial_point(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        let k = self.rows.iter().filter(|r| r.r).count() as f64;
        let frac = ((k + 0.5) / (n + 1.0)).clamp(1e-3, 1.0 - 1e-3);
        let mut u = vec![0.0; self.dim()];
        u[0] = (frac / (1.0 - frac)).ln();
        u[5] = 0.5f64.ln();
        u[6] = 0.5f64.ln();
        u
    }

    // Effects are centred: every cell and season half holds hundreds of
    // claims, where the non-centred form leaves a ridge between each SD and
    // its standardised effects.
    fn evaluate(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let pr = &self.design.priors;
        let c = self.design.n_cells();
        let (chi, eps) = (&u[7..7 + c], &u[7 + c..]);
        let mut lp = 0.0;
        for &p in &u[..5] {
            lp += normal_log_pdf(p, 0.0, pr.coef_sd);
        }
        let (a, da) = log_scale_prior(u[5], pr.scale_sd);
        let (b, db) = log_scale_prior(u[6], pr.scale_sd);
        lp += a + b;
        if let Some(g) = grad.as_deref_mut() {
            for k in 0..5 {
                g[k] = -u[k] / (pr.coef_sd * pr.coef_sd);
            }
            g[5] = da;
            g[6] = db;
        }
        for (range, k) in [(7..7 + c, 5), (7 + c..u.len(), 6)] {
            let inv_var = (-2.0 * u[k]).exp();
            for i in range {
                lp += -0.5 * u[i] * u[i] * inv_var - u[k] - 0.5 * (2.0 * std::f64::consts::PI).ln();
                if let Some(g) = grad.as_deref_mut() {
                    g[i] = -u[i] * inv_var;
                    g[k] += u[i] * u[i] * inv_var - 1.0;
                }
            }
        }
        for row in &self.rows {
            let eta = u[0] + row.x.iter().zip(&u[1..5]).map(|(x, p)| x * p).sum::<f64>() + chi[row.cell] + eps[row.season];
            lp += if row.r { log_expit(eta) } else { log_expit(-eta) };
            if let Some(g) = grad.as_deref_mut() {
                let r = (row.r as u8 as f64) - expit(eta);
                g[0] += r;
                for k in 0..4 {
                    g[1 + k] += r * row.x[k];
                }
                g[7 + row.cell] += r;
                g[7 + c + row.season] += r;
            }
        }
        lp
    }
}

impl LogDensity for ExceedancePosterior {
    fn dim(&self) -> usize {
        7 + self.design.n_cells() + self.design.seasons.len()
    }

    fn log_density(&self, u: &[f64]) -> f64 {
        nan_to_neg_inf(self.evaluate(u, None))
    }
}

impl GradientDensity for ExceedancePosterior {
    fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        nan_to_neg_inf(self.evaluate(u, Some(grad)))
    }
}

fn nan_to_neg_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// `expit{p0 + p1 POH + p2 MESHS + p3 MESHS·POH + p4 Exp + chi(s) + eps_p(t)}`
/// with covariates already standardised.
pub fn exceedance_prob(features: &[f64; 4], p: &[f64; 5], chi: f64, eps_p: f64) -> f64 {
    expit(p[0] + features.iter().zip(&p[1..]).map(|(x, c)| x * c).sum::<f64>() + chi + eps_p)
}

// ---------------------------------------------------------------------------
// spatial fields

struct SpatialField {
    distances: DMatrix<f64>,
    kernel: Kernel,
}

impl SpatialField {
    fn covariance(&self, l: f64) -> Option<CovarianceMatrix> {
        if !(l > 0.0) || !l.is_finite() {
            return None;
        }
        CovarianceMatrix::from_distances(&self.distances, &self.kernel.with_length_scale(l)).ok()
    }

    /// Field values `L z`, the log-density pieces and, if asked, `dL/dl`.
    fn realise(&self, l: f64, z: &[f64], with_derivative: bool) -> Option<(Vec<f64>, CovarianceMatrix, Option<DMatrix<f64>>)> {
        let cov = self.covariance(l)?;
        let mut x = vec![0.0; z.len()];
        cov.lower_mul(z, &mut x);
        let dl = with_derivative.then(|| {
            cov.cholesky_length_scale_derivative(&self.distances, &self.kernel.with_length_scale(l))
        });
        Some((x, cov, dl))
    }
}

/// Accumulates the gradient through `x = L(l) z` given `dlp/dx`.
fn field_chain_rule(
    cov: &CovarianceMatrix,
    d_lower: &DMatrix<f64>,
    z: &[f64],
    g_x: &[f64],
    l: f64,
    g_z: &mut [f64],
) -> f64 {
    let n = z.len();
    let mut tmp = vec![0.0; n];
    lower_t_mul(cov.cholesky(), g_x, &mut tmp);
    for i in 0..n {
        g_z[i] += tmp[i];
    }
    lower_mul(d_lower, z, &mut tmp);
    l * g_x.iter().zip(&tmp).map(|(a, b)| a * b).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Beta body

pub const BODY_SCALARS: [&str; 6] = ["nu0", "nu1", "nu2", "nu3", "log_kappa", "log_length_scale_beta"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaModelParams {
    pub nu: [f64; 4],
    pub kappa: f64,
    pub x_beta: Vec<f64>,
    pub length_scale_beta: f64,
}

struct BodyRow {
    /// POH, MESHS, exposure.
    x: [f64; 3],
    cell: usize,
    scaled: f64,
}

pub struct BodyPosterior {
    pub design: ValueDesign,
    rows: Vec<BodyRow>,
    field: SpatialField,
}

impl BodyPosterior {
    pub fn new(design: ValueDesign) -> Result<Self, ValueModelError> {
        let b = design.boundary();
        let rows: Vec<BodyRow> = design
            .claims
            .iter()
            .filter(|c| !design.is_exceedance(c.z))
            .map(|c| {
                let f = design.standardizer.features(&c.into());
                BodyRow {
                    x: [f[0], f[1], f[3]],
                    cell: c.cell,
                    scaled: c.z / b,
                }
            })
            .collect();
        if rows.is_empty() {
            return Err(ValueModelError::NoBodyClaims);
        }
        let field = SpatialField {
            distances: design.distances(),
            kernel: Kernel::RationalQuadratic(RationalQuadParams {
                length_scale: 1.0,
                squared_distance: false,
            }),
        };
        Ok(Self { design, rows, field })
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = BODY_SCALARS.iter().map(|s| s.to_string()).collect();
        names.extend((0..self.design.n_cells()).map(|i| format!("x_beta_z[{i}]")));
        names
    }

    pub fn params_from(&self, u: &[f64]) -> Option<BetaModelParams> {
        let l = u[5].exp();
        let (x, _, _) = self.field.realise(l, &u[6..], false)?;
        Some(BetaModelParams {
            nu: [u[0], u[1], u[2], u[3]],
            kappa: u[4].exp(),
            x_beta: x,
            length_scale_beta: l,
        })
    }

    fn initial_point(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        let m = (self.rows.iter().map(|r| r.scaled).sum::<f64>() / n).clamp(1e-3, 1.0 - 1e-3);
        let v = self.rows.iter().map(|r| (r.scaled - m).powi(2)).sum::<f64>() / n;
        let kappa = if v > 0.0 { (m * (1.0 - m) / v - 1.0).clamp(0.5, 1e3) } else { 10.0 };
        let mut u = vec![0.0; self.dim()];
        u[0] = (m / (1.0 - m)).ln();
        u[4] = kappa.ln();
        u[5] = (2.0 * min_spacing(&self.field.distances)).ln();
        u
    }

    fn evaluate(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let pr = &self.design.priors;
        let c = self.design.n_cells();
        let l = u[5].exp();
        let z = &u[6..];
        let Some((x, cov, d_lower)) = self.field.realise(l, z, grad.is_some()) else {
            return f64::NEG_INFINITY;
        };
        let log_b = self.design.boundary().ln();
        let mut lp = 0.0;
        for &v in &u[..4] {
            lp += normal_log_pdf(v, 0.0, pr.coef_sd);
        }
        let (a, da) = log_scale_prior(u[4], pr.kappa_sd);
        let (b, db) = log_scale_prior(u[5], pr.length_scale_sd);
        lp += a + b + std_normal_sum(z);
        let mut g_x = vec![0.0; c];
        if let Some(g) = grad.as_deref_mut() {
            for k in 0..4 {
                g[k] = -u[k] / (pr.coef_sd * pr.coef_sd);
            }
            g[4] = da;
            g[5] = db;
            for k in 0..c {
                g[6 + k] = -z[k];
            }
        }
        for row in &self.rows {
            let eta = u[0] + row.x.iter().zip(&u[1..4]).map(|(x, v)| x * v).sum::<f64>() + x[row.cell];
            let bg = beta_log_pdf_grad(row.scaled, eta, u[4]);
            lp += bg.value - log_b;
            if let Some(g) = grad.as_deref_mut() {
                g[0] += bg.d_eta_nu;
                for k in 0..3 {
                    g[1 + k] += bg.d_eta_nu * row.x[k];
                }
                g[4] += bg.d_log_kappa;
                g_x[row.cell] += bg.d_eta_nu;
            }
        }
        if let (Some(g), Some(dl)) = (grad, d_lower) {
            g[5] += field_chain_rule(&cov, &dl, z, &g_x, l, &mut g[6..]);
        }
        lp
    }
}

impl LogDensity for BodyPosterior {
    fn dim(&self) -> usize {
        6 + self.design.n_cells()
    }

    fn log_density(&self, u: &[f64]) -> f64 {
        nan_to_neg_inf(self.evaluate(u, None))
    }
}

impl GradientDensity for BodyPosterior {
    fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        nan_to_neg_inf(self.evaluate(u, Some(grad)))
    }
}

/// Body log-likelihood of one residual: the Beta log-density of
/// `Z / f^-1(u)` minus `log f^-1(u)`.
pub fn beta_body_log_lik(z: f64, nu_mean: f64, kappa: f64, threshold_u: f64) -> Result<f64, ValueModelError> {
    let b = f_inverse(threshold_u);
    if !(z > 0.0 && z < b) {
        return Err(ValueModelError::Design(format!("residual {z} outside the body support (0, {b})")));
    }
    let p = BetaMeanPrecision::new(nu_mean, kappa).map_err(|e| ValueModelError::Design(e.to_string()))?;
    let v = crate::distributions::beta_log_pdf(z / b, &p).map_err(|e| ValueModelError::Design(e.to_string()))?;
    Ok(v - b.ln())
}

// ---------------------------------------------------------------------------
// GPD tail

pub const TAIL_SCALARS: [&str; 7] = ["sigma0", "sigma1", "sigma2", "sigma3", "xi1", "xi2", "log_length_scale_sigma"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpdModelParams {
    pub sigma: [f64; 4],
    pub x_sigma: Vec<f64>,
    pub length_scale_sigma: f64,
    /// `(xi1, xi2)`: May–August and otherwise.
    pub xi_season: (f64, f64),
    pub threshold_u: f64,
}

impl GpdModelParams {
    pub fn xi_for(&self, date: NaiveDate) -> f64 {
        if is_hail_season(date) {
            self.xi_season.0
        } else {
            self.xi_season.1
        }
    }
}

/// `sigma0 + sigma1 MESHS + sigma2 MESHS·POH + sigma3 Exp + X^sigma(s)`,
/// with covariates already standardised.
pub fn log_sigma_link(features: &[f64; 4], sigma: &[f64; 4], x_sigma: f64) -> f64 {
    sigma[0] + sigma[1] * features[1] + sigma[2] * features[2] + sigma[3] * features[3] + x_sigma
}

struct TailRow {
    /// MESHS, MESHS·POH, exposure.
    x: [f64; 3],
    cell: usize,
    season: bool,
    excess: f64,
    log_jacobian: f64,
}

pub struct TailPosterior {
    pub design: ValueDesign,
    rows: Vec<TailRow>,
    field: SpatialField,
}

impl TailPosterior {
    pub fn new(design: ValueDesign) -> Result<Self, ValueModelError> {
        let rows: Vec<TailRow> = design
            .claims
            .iter()
            .filter(|c| design.is_exceedance(c.z))
            .map(|c| {
                let f = design.standardizer.features(&c.into());
                TailRow {
                    x: [f[1], f[2], f[3]],
                    cell: c.cell,
                    season: is_hail_season(c.date),
                    excess: c.z.ln_1p() - design.threshold_u,
                    log_jacobian: -c.z.ln_1p(),
                }
            })
            .collect();
        if rows.is_empty() {
            return Err(ValueModelError::NoExceedances);
        }
        let field = SpatialField {
            distances: design.distances(),
            kernel: Kernel::Matern32(MaternParams {
                nu: 1.5,
                length_scale: 1.0,
            }),
        };
        Ok(Self { design, rows, field })
    }

    pub fn n_exceedances(&self) -> usize {
        self.rows.len()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = TAIL_SCALARS.iter().map(|s| s.to_string()).collect();
        names.extend((0..self.design.n_cells()).map(|i| format!("x_sigma_z[{i}]")));
        names
    }

    pub fn params_from(&self, u: &[f64]) -> Option<GpdModelParams> {
        let l = u[6].exp();
        let (x, _, _) = self.field.realise(l, &u[7..], false)?;
        Some(GpdModelParams {
            sigma: [u[0], u[1], u[2], u[3]],
            x_sigma: x,
            length_scale_sigma: l,
            xi_season: (u[4], u[5]),
            threshold_u: self.design.threshold_u,
        })
    }

    fn initial_point(&self) -> Vec<f64> {
        let excess: Vec<f64> = self.rows.iter().map(|r| r.excess).collect();
        let (log_sigma, xi) = match fit_gpd_ml(&excess) {
            Ok(f) => (f.sigma.ln(), f.xi.clamp(0.0, 0.8)),
            Err(_) => {
                let m = excess.iter().sum::<f64>() / excess.len() as f64;
                (m.max(1e-3).ln(), 0.1)
            }
        };
        let mut u = vec![0.0; self.dim()];
        u[0] = log_sigma;
        u[4] = xi;
        u[5] = xi;
        u[6] = (2.0 * min_spacing(&self.field.distances)).ln();
        u
    }

    fn evaluate(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let pr = &self.design.priors;
        let c = self.design.n_cells();
        let l = u[6].exp();
        let z = &u[7..];
        let Some((x, cov, d_lower)) = self.field.realise(l, z, grad.is_some()) else {
            return f64::NEG_INFINITY;
        };
        let mut lp = 0.0;
        for &v in &u[..4] {
            lp += normal_log_pdf(v, 0.0, pr.coef_sd);
        }
        lp += normal_log_pdf(u[4], 0.0, pr.xi_sd) + normal_log_pdf(u[5], 0.0, pr.xi_sd);
        let (a, da) = log_scale_prior(u[6], pr.length_scale_sd);
        lp += a + std_normal_sum(z);
        let mut g_x = vec![0.0; c];
        if let Some(g) = grad.as_deref_mut() {
            for k in 0..4 {
                g[k] = -u[k] / (pr.coef_sd * pr.coef_sd);
            }
            g[4] = -u[4] / (pr.xi_sd * pr.xi_sd);
            g[5] = -u[5] / (pr.xi_sd * pr.xi_sd);
            g[6] = da;
            for k in 0..c {
                g[7 + k] = -z[k];
            }
        }
        for row in &self.rows {
            let log_sigma = u[0] + row.x.iter().zip(&u[1..4]).map(|(x, v)| x * v).sum::<f64>() + x[row.cell];
            let xi_k = if row.season { 4 } else { 5 };
            let gg = gpd_log_pdf_grad(row.excess, log_sigma, u[xi_k]);
            if gg.value == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            lp += gg.value + row.log_jacobian;
            if let Some(g) = grad.as_deref_mut() {
                g[0] += gg.d_log_sigma;
                for k in 0..3 {
                    g[1 + k] += gg.d_log_sigma * row.x[k];
                }
                g[xi_k] += gg.d_xi;
                g_x[row.cell] += gg.d_log_sigma;
            }
        }
        if let (Some(g), Some(dl)) = (grad, d_lower) {
            g[6] += field_chain_rule(&cov, &dl, z, &g_x, l, &mut g[7..]);
        }
        lp
    }
}

impl LogDensity for TailPosterior {
    fn dim(&self) -> usize {
        7 + self.design.n_cells()
    }

    fn log_density(&self, u: &[f64]) -> f64 {
        nan_to_neg_inf(self.evaluate(u, None))
    }
}

impl GradientDensity for TailPosterior {
    fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        nan_to_neg_inf(self.evaluate(u, Some(grad)))
    }
}

/// Tail log-likelihood of one residual: GPD log-density of `f(Z) - u`
/// plus `log f'(Z) = -log(1 + Z)`.
pub fn gpd_tail_log_lik(z: f64, sigma: f64, xi: f64, threshold_u: f64) -> Result<f64, ValueModelError> {
    let y = z.ln_1p() - threshold_u;
    if !(y >= 0.0) {
        return Err(ValueModelError::Design(format!("residual {z} is below the threshold")));
    }
    let v = gpd_log_pdf_grad(y, sigma.ln(), xi).value;
    if v == f64::NEG_INFINITY {
        return Err(ValueModelError::Design(format!("excess {y} outside the GPD support")));
    }
    Ok(v - z.ln_1p())
}

fn min_spacing(d: &DMatrix<f64>) -> f64 {
    let n = d.nrows();
    let mut m = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j && d[(i, j)] > 0.0 {
                m = m.min(d[(i, j)]);
            }
        }
    }
    if m.is_finite() {
        m
    } else {
        10.0
    }
}

// ---------------------------------------------------------------------------
// fitting

#[derive(Debug, Clone)]
pub struct ValueFit {
    pub design: ValueDesign,
    pub exceedance: PosteriorSamples,
    pub body: PosteriorSamples,
    pub tail: PosteriorSamples,
}

pub fn fit_exceedance(design: &ValueDesign, config: &NutsConfig) -> Result<PosteriorSamples, ValueModelError> {
    let post = ExceedancePosterior::new(design.clone());
    let x = DMatrix::from_fn(post.rows.len(), 5, |i, j| if j == 0 { 1.0 } else { post.rows[i].x[j - 1] });
    let target = DesignReparam::new(&post, 0, &x, design.priors.coef_sd);
    let inits = jittered(&target.from_model(&post.initial_point()), config.n_chains.max(1), config.seed ^ 0xE1);
    let mut s = nuts_sample(&target, &inits, post.names(), config)?;
    target.samples_to_model(&mut s);
    check_divergences(s)
}

pub fn fit_tail(design: &ValueDesign, config: &NutsConfig) -> Result<PosteriorSamples, ValueModelError> {
    let post = TailPosterior::new(design.clone())?;
    let x = DMatrix::from_fn(post.rows.len(), 4, |i, j| if j == 0 { 1.0 } else { post.rows[i].x[j - 1] });
    let target = DesignReparam::new(&post, 0, &x, design.priors.coef_sd);
    let inits = jittered(&target.from_model(&post.initial_point()), config.n_chains.max(1), config.seed ^ 0x7A);
    let mut s = nuts_sample(&target, &inits, post.names(), config)?;
    target.samples_to_model(&mut s);
    check_divergences(s)
}

pub fn fit_body(design: &ValueDesign, config: &DemcConfig) -> Result<PosteriorSamples, ValueModelError> {
    let post = BodyPosterior::new(design.clone())?;
    let d = post.dim();
    // archive seeded with 10 d jittered points around a moment-based start
    let inits = jittered(&post.initial_point(), (10 * d).max(config.n_chains), config.seed ^ 0xB0);
    Ok(demc_snooker_sample(&post, &inits, post.names(), config)?)
}

/// The three parts fitted independently on the same design. The regression
/// coefficients of the two NUTS parts are sampled in QR-orthogonalised
/// coordinates because POH, MESHS and their product are strongly correlated.
pub fn fit_values(design: ValueDesign, nuts: &NutsConfig, demc: &DemcConfig) -> Result<ValueFit, ValueModelError> {
    let tail = fit_tail(&design, nuts)?;
    let exceedance = fit_exceedance(&design, nuts)?;
    let body = fit_body(&design, demc)?;
    Ok(ValueFit {
        design,
        exceedance,
        body,
        tail,
    })
}

fn check_divergences(s: PosteriorSamples) -> Result<PosteriorSamples, ValueModelError> {
    if s.divergence_rate() > 0.1 {
        return Err(ValueModelError::FitQuality(s.divergence_rate()));
    }
    Ok(s)
}

fn jittered(base: &[f64], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    (0..n)
        .map(|_| base.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// claim value draws

/// Two-part law of one residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaimValueLaw {
    pub p_exceed: f64,
    pub nu_mean: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub xi: f64,
    pub threshold_u: f64,
}

impl ClaimValueLaw {
    pub fn sample_residual<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let b = f_inverse(self.threshold_u);
        if rng.random::<f64>() < self.p_exceed {
            let e = gpd_exceedance_quantile(rng.random::<f64>(), self.sigma, self.xi);
            f_inverse(self.threshold_u + e)
        } else {
            let p = BetaMeanPrecision {
                nu_mean: self.nu_mean,
                kappa: self.kappa,
            };
            b * beta_sample(&p, rng)
        }
    }

    /// Distribution function of the residual.
    pub fn residual_cdf(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return 0.0;
        }
        let b = f_inverse(self.threshold_u);
        let body = 1.0 - self.p_exceed;
        if z <= b {
            let p = BetaMeanPrecision {
                nu_mean: self.nu_mean,
                kappa: self.kappa,
            };
            body * beta_cdf(z / b, &p)
        } else {
            body + self.p_exceed * gpd_exceedance_cdf(z.ln_1p() - self.threshold_u, self.sigma, self.xi)
        }
    }
}

/// `Y = M^YC + Z` with `Z` drawn from its two-part law.
pub fn sample_claim_value<R: Rng + ?Sized>(law: &ClaimValueLaw, m_yc: f64, rng: &mut R) -> f64 {
    m_yc + law.sample_residual(rng)
}

impl ValueFit {
    /// Law of a claim under posterior draw `draw` of each part (indices
    /// wrap around each part's pooled draws). Seasons not seen in training
    /// get a fresh effect from the fitted season-effect SD.
    pub fn law_for<R: Rng + ?Sized>(&self, ctx: &ClaimContext, draw: usize, rng: &mut R) -> ClaimValueLaw {
        let d = &self.design;
        let c = d.n_cells();
        let f = d.standardizer.features(ctx);

        let e = pooled_draw(&self.exceedance, draw);
        let p: [f64; 5] = std::array::from_fn(|k| e[k]);
        let chi = e[7 + ctx.cell];
        let eps_sd = e[6].exp();
        let eps = match d.seasons.binary_search(&season_half(ctx.date)) {
            Ok(g) => e[7 + c + g],
            Err(_) => Normal::new(0.0, eps_sd).map(|n| n.sample(rng)).unwrap_or(0.0),
        };

        let b = pooled_draw(&self.body, draw);
        let x_beta = field_value(&b[6..], b[5].exp(), ctx.cell, &d.cells, body_kernel());
        let eta_nu = b[0] + b[1] * f[0] + b[2] * f[1] + b[3] * f[3] + x_beta;

        let t = pooled_draw(&self.tail, draw);
        let x_sigma = field_value(&t[7..], t[6].exp(), ctx.cell, &d.cells, tail_kernel());
        let log_sigma = log_sigma_link(&f, &[t[0], t[1], t[2], t[3]], x_sigma);
        let xi = if is_hail_season(ctx.date) { t[4] } else { t[5] };

        ClaimValueLaw {
            p_exceed: exceedance_prob(&f, &p, chi, eps),
            nu_mean: expit(eta_nu).clamp(1e-9, 1.0 - 1e-9),
            kappa: b[4].exp(),
            sigma: log_sigma.exp(),
            xi,
            threshold_u: d.threshold_u,
        }
    }
}

fn body_kernel() -> Kernel {
    Kernel::RationalQuadratic(RationalQuadParams {
        length_scale: 1.0,
        squared_distance: false,
    })
}

fn tail_kernel() -> Kernel {
    Kernel::Matern32(MaternParams {
        nu: 1.5,
        length_scale: 1.0,
    })
}

fn pooled_draw(s: &PosteriorSamples, draw: usize) -> &[f64] {
    let per_chain = s.n_draws();
    let i = draw % (per_chain * s.n_chains());
    &s.chains[i / per_chain].draws[i % per_chain]
}

/// Row `cell` of `L z`; recomputes the factor, which is small on the coarse grid.
fn field_value(z: &[f64], l: f64, cell: usize, cells: &[(f64, f64)], kernel: Kernel) -> f64 {
    let dist = distance_matrix(Locations::LonLat(cells));
    match CovarianceMatrix::from_distances(&dist, &kernel.with_length_scale(l)) {
        Ok(cov) => {
            let lower = cov.cholesky();
            (0..=cell).map(|j| lower[(cell, j)] * z[j]).sum()
        }
        Err(_) => 0.0,
    }
}

// ---------------------------------------------------------------------------
// coarse grid

/// Grouping of fine cells into coarse cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseGrid {
    /// Coarse index of every fine cell.
    pub fine_to_coarse: Vec<usize>,
    /// Coarse centroids, `(lon, lat)`.
    pub centroids: Vec<(f64, f64)>,
    /// Training claims per coarse cell.
    pub claim_counts: Vec<usize>,
}

/// Aggregates `block × block` groups of fine cells, then repeatedly merges
/// the coarse cell with the fewest claims into its nearest neighbour until
/// every cell holds at least `min_claims` claims (or one cell is left).
/// `fine_lonlat` are the fine-cell centroids indexed `y * nx + x`;
/// `claims_per_fine` counts training claims per fine cell.
pub fn build_coarse_grid(
    nx: usize,
    ny: usize,
    fine_lonlat: &[(f64, f64)],
    claims_per_fine: &[usize],
    block: usize,
    min_claims: usize,
) -> CoarseGrid {
    let bx = nx.div_ceil(block);
    let by = ny.div_ceil(block);
    let mut group: Vec<usize> = (0..nx * ny).map(|i| (i / nx / block) * bx + (i % nx) / block).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bx * by];
    for (i, &g) in group.iter().enumerate() {
        members[g].push(i);
    }
    let centroid = |m: &[usize]| {
        let n = m.len() as f64;
        let lon = m.iter().map(|&i| fine_lonlat[i].0).sum::<f64>() / n;
        let lat = m.iter().map(|&i| fine_lonlat[i].1).sum::<f64>() / n;
        (lon, lat)
    };
    loop {
        let live: Vec<usize> = (0..members.len()).filter(|&g| !members[g].is_empty()).collect();
        if live.len() <= 1 {
            break;
        }
        let count = |g: usize| members[g].iter().map(|&i| claims_per_fine[i]).sum::<usize>();
        let Some(&small) = live.iter().filter(|&&g| count(g) < min_claims).min_by_key(|&&g| (count(g), g)) else {
            break;
        };
        let c0 = centroid(&members[small]);
        let target = live
            .iter()
            .copied()
            .filter(|&g| g != small)
            .min_by(|&a, &b| {
                let da = chordal_distance(c0, centroid(&members[a]));
                let db = chordal_distance(c0, centroid(&members[b]));
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("at least two live cells");
        let moved = std::mem::take(&mut members[small]);
        members[target].extend(moved);
    }
    let live: Vec<usize> = (0..members.len()).filter(|&g| !members[g].is_empty()).collect();
    let mut centroids = Vec::new();
    let mut claim_counts = Vec::new();
    for (k, &g) in live.iter().enumerate() {
        for &i in &members[g] {
            group[i] = k;
        }
        centroids.push(centroid(&members[g]));
        claim_counts.push(members[g].iter().map(|&i| claims_per_fine[i]).sum());
    }
    CoarseGrid {
        fine_to_coarse: group,
        centroids,
        claim_counts,
    }
}
