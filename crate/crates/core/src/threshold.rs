//! Threshold selection for the GPD tail: maximum-likelihood fits over a grid
//! of candidate thresholds, scored by the l1 distance between empirical and
//! fitted quantiles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{gpd_exceedance_quantile, gpd_log_pdf_grad};

/// Threshold on the `log(1 + Z)` scale used by the shipped value model.
pub const DEFAULT_THRESHOLD_U: f64 = 8.06;

pub const MIN_EXCEEDANCES: usize = 10;

/// Chi-square(1) 95% quantile for the profile-likelihood interval.
const CHI2_1_95: f64 = 3.841_458_820_694_124;

const XI_BOUNDS: (f64, f64) = (-0.95, 2.0);

#[derive(Debug, Error, PartialEq)]
pub enum ThresholdError {
    #[error("need at least {MIN_EXCEEDANCES} exceedances, got {0}")]
    TooFewExceedances(usize),
    #[error("exceedances must be finite and non-negative")]
    InvalidData,
    #[error("likelihood maximisation failed from every starting point")]
    NoConvergence,
    #[error("no candidate threshold leaves enough exceedances")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub sigma: f64,
    pub xi: f64,
    pub log_lik: f64,
    /// Profile-likelihood 95% interval for `xi`.
    pub xi_interval: (f64, f64),
}

fn log_lik_grad(data: &[f64], log_sigma: f64, xi: f64) -> (f64, [f64; 2]) {
    let mut value = 0.0;
    let mut grad = [0.0; 2];
    for &y in data {
        let g = gpd_log_pdf_grad(y, log_sigma, xi);
        if !g.value.is_finite() {
            return (f64::NEG_INFINITY, [0.0; 2]);
        }
        value += g.value;
        grad[0] += g.d_log_sigma;
        grad[1] += g.d_xi;
    }
    (value, grad)
}

/// Quasi-Newton (BFGS) ascent on `(log sigma, xi)` with `xi` kept inside
/// fixed bounds by projection. Returns the optimum and its log-likelihood.
fn bfgs(data: &[f64], start: [f64; 2]) -> Option<([f64; 2], f64)> {
    let project = |x: [f64; 2]| [x[0], x[1].clamp(XI_BOUNDS.0, XI_BOUNDS.1)];
    let mut x = project(start);
    let (mut f, mut g) = log_lik_grad(data, x[0], x[1]);
    if !f.is_finite() {
        return None;
    }
    let scale = data.len() as f64;
    // inverse Hessian of the negative log-likelihood
    let mut h = [[1.0 / scale, 0.0], [0.0, 1.0 / scale]];
    for _ in 0..500 {
        let dir = [
            h[0][0] * g[0] + h[0][1] * g[1],
            h[1][0] * g[0] + h[1][1] * g[1],
        ];
        let slope = dir[0] * g[0] + dir[1] * g[1];
        let dir = if slope <= 0.0 { [g[0] / scale, g[1] / scale] } else { dir };
        let slope = dir[0] * g[0] + dir[1] * g[1];
        let mut step = 1.0;
        let mut next = None;
        for _ in 0..60 {
            let cand = project([x[0] + step * dir[0], x[1] + step * dir[1]]);
            let (fc, gc) = log_lik_grad(data, cand[0], cand[1]);
            if fc.is_finite() && fc >= f + 1e-4 * step * slope {
                next = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let (xn, fn_, gn) = next?;
        let s = [xn[0] - x[0], xn[1] - x[1]];
        // gradient of the negative log-likelihood changes by -(gn - g)
        let y = [g[0] - gn[0], g[1] - gn[1]];
        let sy = s[0] * y[0] + s[1] * y[1];
        let converged = (fn_ - f).abs() < 1e-12 * (1.0 + f.abs())
            && s[0].abs() < 1e-10
            && s[1].abs() < 1e-10
            || gn[0].abs() + gn[1].abs() < 1e-8 * scale;
        x = xn;
        f = fn_;
        g = gn;
        if converged {
            return Some((x, f));
        }
        if sy > 1e-14 {
            let hy = [h[0][0] * y[0] + h[0][1] * y[1], h[1][0] * y[0] + h[1][1] * y[1]];
            let yhy = y[0] * hy[0] + y[1] * hy[1];
            let rho = 1.0 / sy;
            for i in 0..2 {
                for j in 0..2 {
                    h[i][j] += (1.0 + yhy * rho) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
    }
    Some((x, f))
}

/// Maximum of the log-likelihood over `log sigma` with `xi` held fixed.
fn profile(data: &[f64], xi: f64, mean: f64, max: f64) -> f64 {
    // for xi < 0 sigma must exceed -xi * max
    let lower = if xi < 0.0 { (-xi * max).max(1e-12).ln() + 1e-9 } else { (mean * 1e-6).ln() };
    let mut a = lower;
    let mut b = (mean * 1e3).ln().max(a + 1.0);
    let f = |s: f64| log_lik_grad(data, s, xi).0;
    // golden-section search; the profile is unimodal in log sigma
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-10 {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    fc.max(fd)
}

fn profile_interval(data: &[f64], xi_hat: f64, log_lik: f64) -> (f64, f64) {
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let max = data.iter().cloned().fold(0.0, f64::max);
    let cut = log_lik - 0.5 * CHI2_1_95;
    let find = |dir: f64| -> f64 {
        let bound = if dir < 0.0 { XI_BOUNDS.0 } else { XI_BOUNDS.1 };
        let mut inner = xi_hat;
        let mut step = 0.05;
        let mut outer = xi_hat;
        loop {
            outer = (outer + dir * step).clamp(XI_BOUNDS.0, XI_BOUNDS.1);
            if profile(data, outer, mean, max) < cut {
                break;
            }
            if outer == bound {
                return bound;
            }
            inner = outer;
            step *= 2.0;
        }
        for _ in 0..60 {
            let mid = 0.5 * (inner + outer);
            if profile(data, mid, mean, max) >= cut {
                inner = mid;
            } else {
                outer = mid;
            }
        }
        0.5 * (inner + outer)
    };
    (find(-1.0), find(1.0))
}

/// Maximum-likelihood GPD fit to threshold exceedances (values `>= 0`).
pub fn fit_gpd_ml(exceedances: &[f64]) -> Result<GpdFit, ThresholdError> {
    let (x, log_lik) = maximise(exceedances)?;
    Ok(GpdFit {
        sigma: x[0].exp(),
        xi: x[1],
        log_lik,
        xi_interval: profile_interval(exceedances, x[1], log_lik),
    })
}

/// Multi-start maximisation over `(log sigma, xi)`.
fn maximise(exceedances: &[f64]) -> Result<([f64; 2], f64), ThresholdError> {
    if exceedances.len() < MIN_EXCEEDANCES {
        return Err(ThresholdError::TooFewExceedances(exceedances.len()));
    }
    if exceedances.iter().any(|y| !y.is_finite() || *y < 0.0) {
        return Err(ThresholdError::InvalidData);
    }
    let mean = exceedances.iter().sum::<f64>() / exceedances.len() as f64;
    let max = exceedances.iter().cloned().fold(0.0, f64::max);
    if !(mean > 0.0) {
        return Err(ThresholdError::InvalidData);
    }
    let mut best: Option<([f64; 2], f64)> = None;
    for xi0 in [-0.4f64, 0.0, 0.4] {
        // method-of-moments style scale, pushed inside the support
        let mut sigma0 = mean * (1.0 - xi0).max(0.1);
        if xi0 < 0.0 {
            sigma0 = sigma0.max(-xi0 * max * 1.01);
        }
        if let Some((x, f)) = bfgs(exceedances, [sigma0.ln(), xi0]) {
            if best.is_none_or(|(_, bf)| f > bf) {
                best = Some((x, f));
            }
        }
    }
    best.ok_or(ThresholdError::NoConvergence)
}

/// Mean absolute difference between sorted exceedances and fitted GPD
/// quantiles at plotting positions `i / (n + 1)`.
pub fn qq_l1_distance(exceedances: &[f64], sigma: f64, xi: f64) -> f64 {
    let mut sorted = exceedances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (x - gpd_exceedance_quantile((i + 1) as f64 / (n + 1) as f64, sigma, xi)).abs())
        .sum::<f64>()
        / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub threshold: f64,
    pub n_exceedances: usize,
    pub l1_distance: f64,
    pub sigma_hat: f64,
    pub xi_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScan {
    /// Sorted by threshold.
    pub rows: Vec<ScanRow>,
    pub selected: f64,
}

impl ThresholdScan {
    pub fn selected_row(&self) -> &ScanRow {
        self.rows
            .iter()
            .find(|r| r.threshold == self.selected)
            .expect("selected threshold is one of the rows")
    }
}

/// Candidate thresholds at 81 equally spaced quantile levels between the
/// 50th and 99th percentiles of `values`.
pub fn default_grid(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (0..81)
        .map(|k| crate::samplers::quantile_sorted(&sorted, 0.5 + 0.49 * k as f64 / 80.0))
        .collect()
}

/// Fits a GPD above each candidate and picks the one with the smallest
/// qq-l1 distance. Candidates leaving fewer than ten exceedances, or whose
/// fit fails, are skipped.
pub fn select_threshold(values: &[f64], candidates: &[f64]) -> Result<ThresholdScan, ThresholdError> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut grid = candidates.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut rows = Vec::with_capacity(grid.len());
    for u in grid {
        let start = sorted.partition_point(|v| *v <= u);
        let exceedances: Vec<f64> = sorted[start..].iter().map(|v| v - u).collect();
        if exceedances.len() < MIN_EXCEEDANCES {
            continue;
        }
        let Ok((x, _)) = maximise(&exceedances) else {
            continue;
        };
        let (sigma, xi) = (x[0].exp(), x[1]);
        rows.push(ScanRow {
            threshold: u,
            n_exceedances: exceedances.len(),
            l1_distance: qq_l1_distance(&exceedances, sigma, xi),
            sigma_hat: sigma,
            xi_hat: xi,
        });
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.l1_distance.total_cmp(&b.l1_distance))
        .ok_or(ThresholdError::EmptyGrid)?;
    Ok(ThresholdScan {
        selected: best.threshold,
        rows: rows.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{gpd_sample, GpdParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gpd_data(n: usize, sigma: f64, xi: f64, seed: u64) -> Vec<f64> {
        let p = GpdParams::new(0.0, sigma, xi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| gpd_sample(&p, &mut rng)).collect()
    }

    #[test]
    fn fit_recovers_heavy_tail() {
        let data = gpd_data(10_000, 2.0, 0.2, 1);
        let fit = fit_gpd_ml(&data).unwrap();
        assert!((fit.sigma - 2.0).abs() < 0.1, "sigma {}", fit.sigma);
        assert!((fit.xi - 0.2).abs() < 0.01 * 5.0, "xi {}", fit.xi);
        assert!(fit.xi_interval.0 < fit.xi && fit.xi < fit.xi_interval.1);
        assert!(fit.xi_interval.0 < 0.2 && 0.2 < fit.xi_interval.1);
    }

    #[test]
    fn fit_recovers_exponential() {
        let data = gpd_data(10_000, 1.5, 0.0, 2);
        let fit = fit_gpd_ml(&data).unwrap();
        assert!(fit.xi.abs() < 0.05, "xi {}", fit.xi);
    }

    #[test]
    fn fit_handles_bounded_tail() {
        let data = gpd_data(5_000, 1.0, -0.3, 3);
        let fit = fit_gpd_ml(&data).unwrap();
        assert!((fit.xi + 0.3).abs() < 0.05, "xi {}", fit.xi);
        let max = data.iter().cloned().fold(0.0, f64::max);
        assert!(fit.sigma > -fit.xi * max);
    }

    #[test]
    fn fit_is_a_local_maximum() {
        let data = gpd_data(2_000, 1.0, 0.1, 4);
        let fit = fit_gpd_ml(&data).unwrap();
        let ll = |s: f64, x: f64| log_lik_grad(&data, s.ln(), x).0;
        for (ds, dx) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
            assert!(ll(fit.sigma + ds, fit.xi + dx) <= fit.log_lik + 1e-9);
        }
    }

    #[test]
    fn fit_rejects_small_or_bad_samples() {
        assert_eq!(fit_gpd_ml(&[1.0, 2.0]), Err(ThresholdError::TooFewExceedances(2)));
        let mut bad = vec![1.0; 12];
        bad[3] = -1.0;
        assert_eq!(fit_gpd_ml(&bad), Err(ThresholdError::InvalidData));
    }

    #[test]
    fn qq_distance_examples() {
        let (sigma, xi) = (1.3, 0.25);
        let n = 99;
        let exact: Vec<f64> = (1..=n)
            .map(|i| gpd_exceedance_quantile(i as f64 / (n + 1) as f64, sigma, xi))
            .collect();
        assert!(qq_l1_distance(&exact, sigma, xi) < 1e-12);
        let shifted: Vec<f64> = exact.iter().map(|x| x + 0.7).collect();
        assert!((qq_l1_distance(&shifted, sigma, xi) - 0.7).abs() < 1e-12);
        let mut reversed = shifted.clone();
        reversed.reverse();
        assert_eq!(qq_l1_distance(&reversed, sigma, xi), qq_l1_distance(&shifted, sigma, xi));
    }

    #[test]
    fn qq_distance_of_self_fit_is_small() {
        let data = gpd_data(10_000, 2.0, 0.1, 5);
        let fit = fit_gpd_ml(&data).unwrap();
        assert!(qq_l1_distance(&data, fit.sigma, fit.xi) < 0.05 * fit.sigma);
    }

    fn change_point_sample(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tail = GpdParams::new(8.0, 1.0, 0.2).unwrap();
        (0..5000)
            .map(|_| {
                if rng.random::<f64>() < 0.7 {
                    rng.random_range(0.0..8.0)
                } else {
                    gpd_sample(&tail, &mut rng)
                }
            })
            .collect()
    }

    #[test]
    fn selects_change_point() {
        let data = change_point_sample(11);
        let scan = select_threshold(&data, &default_grid(&data)).unwrap();
        assert!((7.5..=8.5).contains(&scan.selected), "selected {}", scan.selected);
        let best = scan.selected_row().l1_distance;
        assert!(scan.rows.iter().all(|r| r.l1_distance >= best));
        assert!(scan.rows.windows(2).all(|w| w[0].threshold < w[1].threshold));
    }

    #[test]
    fn selection_ignores_input_order() {
        let data = change_point_sample(12);
        let mut shuffled = data.clone();
        shuffled.reverse();
        shuffled.swap(0, 17);
        let grid = default_grid(&data);
        assert_eq!(select_threshold(&data, &grid), select_threshold(&shuffled, &grid));
    }

    #[test]
    fn pure_gpd_selects_low_threshold() {
        let data = gpd_data(5_000, 1.0, 0.1, 13);
        let grid = default_grid(&data);
        let scan = select_threshold(&data, &grid).unwrap();
        // threshold stability: the distance stays small across the lower grid
        let lower: Vec<&ScanRow> = scan.rows.iter().filter(|r| r.threshold <= grid[40]).collect();
        assert!(lower.iter().all(|r| r.l1_distance < 0.1), "{:?}", lower.iter().map(|r| r.l1_distance).collect::<Vec<_>>());
        assert!(scan.selected <= grid[60]);
    }

    #[test]
    fn empty_grid_is_an_error() {
        let data: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(select_threshold(&data, &[19.5]), Err(ThresholdError::EmptyGrid));
    }

    #[test]
    fn default_grid_spans_upper_half() {
        let data: Vec<f64> = (0..=1000).map(|i| i as f64).collect();
        let grid = default_grid(&data);
        assert_eq!(grid.len(), 81);
        assert!((grid[0] - 500.0).abs() < 1e-9);
        assert!((grid[80] - 990.0).abs() < 1e-9);
    }
}
