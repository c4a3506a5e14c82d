//! Zero-inflated negative binomial, generalized Pareto and mean-precision
//! Beta families, with the link functions shared by both models.
//!
//! Log-densities come in two flavours: checked public functions that take the
//! parameter structs, and unchecked `*_grad` helpers used inside the
//! posterior evaluations, which also return partial derivatives with respect
//! to the unconstrained linear predictors.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

/// Below this `|xi|` the GPD is evaluated through its exponential limit.
pub const XI_ZERO_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DistError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("count must be a non-negative integer, got {0}")]
    InvalidCount(f64),
    #[error("{x} is outside the support [{lower}, {upper}]")]
    OutOfSupport { x: f64, lower: f64, upper: f64 },
}

fn invalid(msg: impl Into<String>) -> DistError {
    DistError::InvalidParameter(msg.into())
}

// ---------------------------------------------------------------------------
// links

/// Logistic function, stable for large `|x|`.
#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(expit(x))`
#[inline]
pub fn log_expit(x: f64) -> f64 {
    -softplus(-x)
}

/// `f(x) = log(1 + x)`, the scale on which the claim-value threshold lives.
pub fn f_transform(x: f64) -> Result<f64, DistError> {
    if !(x > -1.0) {
        return Err(invalid(format!("f_transform needs x > -1, got {x}")));
    }
    Ok(x.ln_1p())
}

/// `f^-1(y) = exp(y) - 1`
#[inline]
pub fn f_inverse(y: f64) -> f64 {
    y.exp_m1()
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

// ---------------------------------------------------------------------------
// zero-inflated negative binomial

/// `psi` is the probability that the negative-binomial branch is active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZinbParams {
    pub psi: f64,
    pub mu: f64,
    pub alpha: f64,
}

impl ZinbParams {
    pub fn new(psi: f64, mu: f64, alpha: f64) -> Result<Self, DistError> {
        let p = Self { psi, mu, alpha };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), DistError> {
        if !(0.0..=1.0).contains(&self.psi) {
            return Err(invalid(format!("psi must lie in [0, 1], got {}", self.psi)));
        }
        if !(self.mu > 0.0) || !(self.alpha > 0.0) {
            return Err(invalid(format!(
                "mu and alpha must be positive, got {} and {}",
                self.mu, self.alpha
            )));
        }
        Ok(())
    }
}

pub fn zinb_log_pmf(x: f64, p: &ZinbParams) -> Result<f64, DistError> {
    p.validate()?;
    if !(x >= 0.0) || x.fract() != 0.0 || !x.is_finite() {
        return Err(DistError::InvalidCount(x));
    }
    let (log_psi, log_1m_psi) = (p.psi.ln(), (-p.psi).ln_1p());
    Ok(zinb_ln_pmf_parts(x as u64, log_psi, log_1m_psi, p.mu, p.alpha))
}

fn zinb_ln_pmf_parts(x: u64, log_psi: f64, log_1m_psi: f64, mu: f64, alpha: f64) -> f64 {
    let log_r = alpha.ln() - (alpha + mu).ln();
    if x == 0 {
        log_add_exp(log_1m_psi, log_psi + alpha * log_r)
    } else {
        let xf = x as f64;
        log_psi + ln_gamma(xf + alpha) - ln_gamma(xf + 1.0) - ln_gamma(alpha)
            + alpha * log_r
            + xf * (mu.ln() - (mu + alpha).ln())
    }
}

/// ZINB log-pmf and its derivatives with respect to `logit(psi)`,
/// `log(mu)` and `alpha`.
#[derive(Debug, Clone, Copy)]
pub struct ZinbGrad {
    pub value: f64,
    pub d_eta_psi: f64,
    pub d_eta_mu: f64,
    pub d_alpha: f64,
}

pub fn zinb_log_pmf_grad(x: u64, eta_psi: f64, eta_mu: f64, alpha: f64) -> ZinbGrad {
    let xf = x as f64;
    let coef = ln_gamma(xf + alpha) - ln_gamma(xf + 1.0) - ln_gamma(alpha);
    let d_coef = if x == 0 { 0.0 } else { digamma(xf + alpha) - digamma(alpha) };
    zinb_grad_parts(x, eta_psi, eta_mu, alpha, coef, d_coef)
}

/// Count-dependent gamma terms of the negative-binomial pmf for one shape,
/// built by recurrence: `ln Γ(x + a) - ln Γ(x + 1) - ln Γ(a)` and
/// `ψ(x + a) - ψ(a)` for `x = 0..=max_x`.
#[derive(Debug, Clone)]
pub struct NbShapeTable {
    alpha: f64,
    coef: Vec<f64>,
    d_coef: Vec<f64>,
}

impl NbShapeTable {
    pub fn new(alpha: f64, max_x: u64) -> Self {
        let n = max_x as usize + 1;
        let mut coef = Vec::with_capacity(n);
        let mut d_coef = Vec::with_capacity(n);
        let (mut c, mut d) = (0.0, 0.0);
        coef.push(c);
        d_coef.push(d);
        for x in 1..n {
            let k = (x - 1) as f64;
            c += (alpha + k).ln() - (x as f64).ln();
            d += 1.0 / (alpha + k);
            coef.push(c);
            d_coef.push(d);
        }
        Self { alpha, coef, d_coef }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Same as [`zinb_log_pmf_grad`] with the table's shape; counts beyond
    /// the table fall back to direct evaluation.
    pub fn zinb_log_pmf_grad(&self, x: u64, eta_psi: f64, eta_mu: f64) -> ZinbGrad {
        match (self.coef.get(x as usize), self.d_coef.get(x as usize)) {
            (Some(&c), Some(&d)) => zinb_grad_parts(x, eta_psi, eta_mu, self.alpha, c, d),
            _ => zinb_log_pmf_grad(x, eta_psi, eta_mu, self.alpha),
        }
    }
}

fn zinb_grad_parts(x: u64, eta_psi: f64, eta_mu: f64, alpha: f64, coef: f64, d_coef: f64) -> ZinbGrad {
    let psi = expit(eta_psi);
    let mu = eta_mu.exp();
    let log_psi = log_expit(eta_psi);
    let log_1m_psi = log_expit(-eta_psi);
    let apm = alpha + mu;
    let log_r = alpha.ln() - apm.ln();
    if x == 0 {
        let log_nb0 = alpha * log_r;
        let log_p0 = log_add_exp(log_1m_psi, log_psi + log_nb0);
        // share of P(0) coming from the negative-binomial branch
        let w = (log_psi + log_nb0 - log_p0).exp();
        let nb0 = log_nb0.exp();
        ZinbGrad {
            value: log_p0,
            d_eta_psi: (nb0 - 1.0) / log_p0.exp() * psi * (1.0 - psi),
            d_eta_mu: w * (-alpha * mu / apm),
            d_alpha: w * (log_r + mu / apm),
        }
    } else {
        let xf = x as f64;
        ZinbGrad {
            value: log_psi + coef + alpha * log_r + xf * (eta_mu - apm.ln()),
            d_eta_psi: 1.0 - psi,
            d_eta_mu: alpha * (xf - mu) / apm,
            d_alpha: d_coef + log_r + mu / apm - xf / apm,
        }
    }
}

/// Draws a zero with probability `1 - psi`, else a negative-binomial count
/// with mean `mu` and shape `alpha` (gamma-Poisson mixture).
pub fn zinb_sample<R: Rng + ?Sized>(p: &ZinbParams, rng: &mut R) -> u64 {
    if rng.random::<f64>() >= p.psi {
        return 0;
    }
    nb_sample(p.mu, p.alpha, rng)
}

pub fn nb_sample<R: Rng + ?Sized>(mu: f64, alpha: f64, rng: &mut R) -> u64 {
    let rate = Gamma::new(alpha, mu / alpha)
        .expect("valid gamma parameters")
        .sample(rng);
    if rate <= 0.0 {
        return 0;
    }
    match Poisson::new(rate) {
        Ok(pois) => pois.sample(rng) as u64,
        Err(_) => 0,
    }
}

// ---------------------------------------------------------------------------
// generalized Pareto

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdParams {
    pub threshold_u: f64,
    pub sigma_u: f64,
    pub xi: f64,
}

impl GpdParams {
    pub fn new(threshold_u: f64, sigma_u: f64, xi: f64) -> Result<Self, DistError> {
        let p = Self {
            threshold_u,
            sigma_u,
            xi,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), DistError> {
        if !(self.sigma_u > 0.0) || !self.xi.is_finite() || !self.threshold_u.is_finite() {
            return Err(invalid(format!(
                "GPD needs sigma_u > 0 and finite xi, got {} and {}",
                self.sigma_u, self.xi
            )));
        }
        Ok(())
    }

    /// Upper end of the support (infinite unless `xi < 0`).
    pub fn upper_endpoint(&self) -> f64 {
        if self.xi < -XI_ZERO_TOL {
            self.threshold_u - self.sigma_u / self.xi
        } else {
            f64::INFINITY
        }
    }

    fn check_support(&self, x: f64) -> Result<f64, DistError> {
        self.validate()?;
        let upper = self.upper_endpoint();
        if !(x >= self.threshold_u && x <= upper) {
            return Err(DistError::OutOfSupport {
                x,
                lower: self.threshold_u,
                upper,
            });
        }
        Ok(x - self.threshold_u)
    }
}

pub fn gpd_cdf(x: f64, p: &GpdParams) -> Result<f64, DistError> {
    let y = p.check_support(x)?;
    Ok(gpd_exceedance_cdf(y, p.sigma_u, p.xi))
}

/// CDF of an exceedance `y >= 0`; clamps to 1 past the upper endpoint.
pub fn gpd_exceedance_cdf(y: f64, sigma: f64, xi: f64) -> f64 {
    let z = y / sigma;
    if xi.abs() < XI_ZERO_TOL {
        -(-z).exp_m1()
    } else {
        let t = 1.0 + xi * z;
        if t <= 0.0 {
            return 1.0;
        }
        -((-1.0 / xi) * t.ln()).exp_m1()
    }
}

pub fn gpd_log_pdf(x: f64, p: &GpdParams) -> Result<f64, DistError> {
    let y = p.check_support(x)?;
    Ok(gpd_log_pdf_grad(y, p.sigma_u.ln(), p.xi).value)
}

pub fn gpd_quantile(q: f64, p: &GpdParams) -> Result<f64, DistError> {
    p.validate()?;
    if !(0.0..1.0).contains(&q) {
        if q == 1.0 && p.xi < -XI_ZERO_TOL {
            return Ok(p.upper_endpoint());
        }
        return Err(invalid(format!("quantile level must lie in [0, 1), got {q}")));
    }
    Ok(p.threshold_u + gpd_exceedance_quantile(q, p.sigma_u, p.xi))
}

pub fn gpd_exceedance_quantile(q: f64, sigma: f64, xi: f64) -> f64 {
    let log_tail = (-q).ln_1p();
    if xi.abs() < XI_ZERO_TOL {
        -sigma * log_tail
    } else {
        sigma * (-xi * log_tail).exp_m1() / xi
    }
}

/// Draws `u + Y` by inversion.
pub fn gpd_sample<R: Rng + ?Sized>(p: &GpdParams, rng: &mut R) -> f64 {
    let q: f64 = rng.random();
    p.threshold_u + gpd_exceedance_quantile(q, p.sigma_u, p.xi)
}

/// GPD log-density of an exceedance with derivatives with respect to
/// `log(sigma)` and `xi`. Outside the support the value is `-inf` and the
/// derivatives are zero.
#[derive(Debug, Clone, Copy)]
pub struct GpdGrad {
    pub value: f64,
    pub d_log_sigma: f64,
    pub d_xi: f64,
}

pub fn gpd_log_pdf_grad(y: f64, log_sigma: f64, xi: f64) -> GpdGrad {
    let out = GpdGrad {
        value: f64::NEG_INFINITY,
        d_log_sigma: 0.0,
        d_xi: 0.0,
    };
    if y < 0.0 {
        return out;
    }
    let sigma = log_sigma.exp();
    let z = y / sigma;
    if xi.abs() < XI_ZERO_TOL {
        return GpdGrad {
            value: -log_sigma - z,
            d_log_sigma: -1.0 + z,
            d_xi: -(z - 0.5 * z * z),
        };
    }
    let t = 1.0 + xi * z;
    if t <= 0.0 {
        return out;
    }
    let log_t = t.ln();
    GpdGrad {
        value: -log_sigma - (1.0 + 1.0 / xi) * log_t,
        d_log_sigma: -1.0 + (1.0 + xi) * z / t,
        d_xi: log_t / (xi * xi) - (1.0 + 1.0 / xi) * z / t,
    }
}

// ---------------------------------------------------------------------------
// mean-precision Beta

/// Beta law with mean `nu_mean` and precision `kappa`; shapes are
/// `(nu * kappa, (1 - nu) * kappa)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaMeanPrecision {
    pub nu_mean: f64,
    pub kappa: f64,
}

impl BetaMeanPrecision {
    pub fn new(nu_mean: f64, kappa: f64) -> Result<Self, DistError> {
        let p = Self { nu_mean, kappa };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), DistError> {
        if !(self.nu_mean > 0.0 && self.nu_mean < 1.0) || !(self.kappa > 0.0) {
            return Err(invalid(format!(
                "beta needs 0 < nu < 1 and kappa > 0, got {} and {}",
                self.nu_mean, self.kappa
            )));
        }
        Ok(())
    }

    pub fn shapes(&self) -> (f64, f64) {
        (self.nu_mean * self.kappa, (1.0 - self.nu_mean) * self.kappa)
    }
}

pub fn beta_log_pdf(x: f64, p: &BetaMeanPrecision) -> Result<f64, DistError> {
    p.validate()?;
    if !(x > 0.0 && x < 1.0) {
        return Err(DistError::OutOfSupport {
            x,
            lower: 0.0,
            upper: 1.0,
        });
    }
    let (a, b) = p.shapes();
    Ok((a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b))
}

pub fn beta_sample<R: Rng + ?Sized>(p: &BetaMeanPrecision, rng: &mut R) -> f64 {
    let (a, b) = p.shapes();
    let draw = rand_distr::Beta::new(a, b)
        .expect("valid beta shapes")
        .sample(rng);
    // keep strictly inside (0, 1)
    draw.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Beta log-density with derivatives with respect to `logit(nu)` and
/// `log(kappa)`; `x` must lie in (0, 1).
#[derive(Debug, Clone, Copy)]
pub struct BetaGrad {
    pub value: f64,
    pub d_eta_nu: f64,
    pub d_log_kappa: f64,
}

pub fn beta_log_pdf_grad(x: f64, eta_nu: f64, log_kappa: f64) -> BetaGrad {
    let nu = expit(eta_nu);
    let kappa = log_kappa.exp();
    let (a, b) = (nu * kappa, (1.0 - nu) * kappa);
    let (lx, l1x) = (x.ln(), (-x).ln_1p());
    let dig_ab = digamma(kappa);
    let da = lx - digamma(a) + dig_ab;
    let db = l1x - digamma(b) + dig_ab;
    BetaGrad {
        value: (a - 1.0) * lx + (b - 1.0) * l1x - ln_beta(a, b),
        d_eta_nu: nu * (1.0 - nu) * kappa * (da - db),
        d_log_kappa: kappa * (nu * da + (1.0 - nu) * db),
    }
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn beta_cdf(x: f64, p: &BetaMeanPrecision) -> f64 {
    let (a, b) = p.shapes();
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        statrs::function::beta::beta_reg(a, b, x)
    }
}

/// Normal log-density.
#[inline]
pub fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}
