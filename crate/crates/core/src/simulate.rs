//! Synthetic hail catalogs drawn from known parameters.
//!
//! A storm day draws a wind direction, a line around the wind-aligned
//! angle, and a hazard intensity that decays away from the line and is
//! modulated by a smooth random field. POH and MESHS are thresholded
//! transforms of that intensity; a mock impact function turns MESHS into
//! CLIMADA-like counts and values. Counts and claim values then follow the
//! count and value models with the configured truths.
//!
//! Every day uses its own ChaCha stream split from the master seed, so a
//! seed fixes the whole catalog.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::count_model::{draw_day_counts, draw_line, CountScalars};
use crate::data_io::{
    downscale_climada_value, is_hail_season, write_buildings, write_claims, write_covariates, write_records,
    BuildingRecord, ClaimRecord, CovariateDay, CovariateGrid, DataError, GridSpec, Header,
};
use crate::geometry::{distance_to_line, unproject, wind_to_line_angle, LineState};
use crate::kernels::{build_covariance, CovarianceMatrix, Kernel, Locations, MaternParams, RationalQuadParams};
use crate::value_model::{season_half, ClaimContext, ClaimValueLaw, Standardizer, ValueClaim};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalendarConfig {
    pub first_year: i32,
    pub last_year: i32,
    /// Number of catalog days, at most 36 per season (see [`catalog_dates`]).
    pub n_days: usize,
    /// Share of catalog days without any storm.
    #[serde(default)]
    pub quiet_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildingConfig {
    pub per_cell: usize,
    /// Insured values are log-normal with these parameters (CHF).
    pub log_value_mean: f64,
    pub log_value_sd: f64,
    pub chf_per_m3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StormConfig {
    /// Wind directions are uniform on this range, degrees.
    pub wind_dir_deg: (f64, f64),
    /// Peak intensity is uniform on this range.
    pub peak: (f64, f64),
    /// Across-line Gaussian width of the intensity, km.
    pub width_km: f64,
    /// Log-scale SD and length scale of the modulating field.
    pub noise_sd: f64,
    pub noise_length_km: f64,
}

/// Mock CLIMADA: `M^NC = min(n_bldg, round(count_coef * MESHS^2 * exposure
/// / mean exposure))` and `M^YC = value_coef * MESHS * insured value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpactConfig {
    pub count_coef: f64,
    pub value_coef: f64,
}

/// True value-model scalars; latent fields are drawn fresh per catalog.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueTruth {
    pub p: [f64; 5],
    pub chi_sd: f64,
    pub eps_p_sd: f64,
    pub nu: [f64; 4],
    pub kappa: f64,
    pub length_scale_beta: f64,
    pub sigma: [f64; 4],
    pub length_scale_sigma: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub threshold_u: f64,
}

impl Default for ValueTruth {
    fn default() -> Self {
        Self {
            p: [-0.8, 0.4, 0.3, 0.2, 0.1],
            chi_sd: 0.3,
            eps_p_sd: 0.2,
            nu: [-0.6, 0.3, 0.2, 0.1],
            kappa: 3.0,
            length_scale_beta: 15.0,
            sigma: [-0.3, 0.3, 0.15, 0.1],
            length_scale_sigma: 15.0,
            xi1: 0.3,
            xi2: -0.1,
            threshold_u: crate::threshold::DEFAULT_THRESHOLD_U,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub calendar: CalendarConfig,
    pub buildings: BuildingConfig,
    pub storm: StormConfig,
    pub impact: ImpactConfig,
    pub counts: CountScalars,
    /// SD of the line angle around the wind-aligned angle, degrees.
    pub theta_sd_deg: f64,
    /// Line offsets are uniform on the grid's vertical extent widened by this.
    pub alpha_margin_km: f64,
    #[serde(default)]
    pub values: ValueTruth,
    /// Fine cells per side of a coarse value-model cell.
    pub coarse_block: usize,
    /// Probability that a claim is reported one day off.
    #[serde(default)]
    pub date_jitter_prob: f64,
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, SimulateError> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_path(path: &Path) -> Result<Self, SimulateError> {
        let s = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: &str| Err(SimulateError::Config(m.to_string()));
        self.grid.validate().map_err(|e| SimulateError::Config(e.to_string()))?;
        let c = &self.calendar;
        if c.first_year > c.last_year || c.n_days == 0 {
            return bad("calendar needs first_year <= last_year and n_days > 0");
        }
        if c.n_days > BLOCKS_PER_SEASON * (c.last_year - c.first_year + 1) as usize {
            return bad("more days requested than the calendar's five-day blocks allow");
        }
        if !(0.0..=1.0).contains(&c.quiet_fraction) || !(0.0..=1.0).contains(&self.date_jitter_prob) {
            return bad("fractions must lie in [0, 1]");
        }
        let b = &self.buildings;
        if b.per_cell == 0 || !(b.log_value_sd > 0.0) || !(b.chf_per_m3 > 0.0) {
            return bad("buildings need per_cell > 0 and positive value spread and price");
        }
        let s = &self.storm;
        if !(s.width_km > 0.0 && s.noise_length_km > 0.0 && s.noise_sd >= 0.0) || s.peak.0 > s.peak.1 || s.wind_dir_deg.0 > s.wind_dir_deg.1 {
            return bad("storm widths must be positive and ranges ordered");
        }
        let k = &self.counts;
        for (name, v) in [
            ("alpha", k.alpha),
            ("sigma_m", k.sigma_m),
            ("length_scale_mu", k.length_scale_mu),
            ("eps_sd_season", k.eps_sd_season),
            ("eps_sd_off", k.eps_sd_off),
        ] {
            if !(v > 0.0) {
                return Err(SimulateError::Config(format!("counts.{name} must be positive")));
            }
        }
        let v = &self.values;
        if !(v.chi_sd > 0.0 && v.eps_p_sd > 0.0 && v.kappa > 0.0 && v.length_scale_beta > 0.0 && v.length_scale_sigma > 0.0) {
            return bad("value-model scales must be positive");
        }
        if !(self.theta_sd_deg > 0.0) || self.coarse_block == 0 || !(self.impact.count_coef >= 0.0 && self.impact.value_coef >= 0.0) {
            return bad("theta_sd_deg, coarse_block and impact coefficients out of range");
        }
        Ok(())
    }

    pub fn alpha_range(&self) -> (f64, f64) {
        let (lo, hi) = self.grid.y_extent();
        (lo - self.alpha_margin_km, hi + self.alpha_margin_km)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const STREAM_BUILDINGS: u64 = 1;
const STREAM_CALENDAR: u64 = 2;
const STREAM_VALUE_LATENTS: u64 = 3;
const STREAM_HAZARD: u64 = 1 << 20;
const STREAM_DAY: u64 = 1 << 21;

/// Buildings uniform within each cell.
pub fn simulate_buildings(config: &ScenarioConfig) -> Vec<BuildingRecord> {
    let g = &config.grid;
    let b = &config.buildings;
    let mut rng = config.rng(STREAM_BUILDINGS);
    let value = LogNormal::new(b.log_value_mean, b.log_value_sd).expect("validated spread");
    let mut out = Vec::with_capacity(g.n_cells() * b.per_cell);
    for cell in 0..g.n_cells() {
        let c = g.centroid(cell);
        for _ in 0..b.per_cell {
            // stay strictly inside the cell so binning is unambiguous
            let dx = rng.random_range(-0.49..0.49) * g.cell_km;
            let dy = rng.random_range(-0.49..0.49) * g.cell_km;
            let p = crate::geometry::PlanarPoint::new(c.x + dx, c.y + dy);
            let (lon, lat) = unproject(p, g.center_lon, g.center_lat);
            let insured_value: f64 = value.sample(&mut rng);
            out.push(BuildingRecord {
                building_id: out.len() as u64 + 1,
                lon,
                lat,
                volume: insured_value / b.chf_per_m3,
                insured_value,
                construction_year: rng.random_range(1900..=2020),
            });
        }
    }
    out
}

/// Catalog dates, sorted. April–September is cut into five-day blocks and
/// each picked block contributes its middle day, so storm days are at least
/// five days apart and the two-day clustering window never reaches another
/// storm day.
pub fn catalog_dates(config: &ScenarioConfig) -> Vec<NaiveDate> {
    let c = &config.calendar;
    let mut rng = config.rng(STREAM_CALENDAR);
    let mut all = Vec::new();
    for y in c.first_year..=c.last_year {
        let start = NaiveDate::from_ymd_opt(y, 4, 1).expect("valid date");
        all.extend((0..BLOCKS_PER_SEASON).map(|b| start + chrono::Duration::days(5 * b as i64 + 2)));
    }
    let mut picked = rand::seq::index::sample(&mut rng, all.len(), c.n_days).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

const BLOCKS_PER_SEASON: usize = 36;

/// Buildings per cell sorted by insured value, largest first.
pub fn buildings_by_cell(grid: &GridSpec, buildings: &[BuildingRecord]) -> Vec<Vec<usize>> {
    let mut by_cell = vec![Vec::new(); grid.n_cells()];
    for (k, b) in buildings.iter().enumerate() {
        if let Some(c) = grid.locate_lonlat(b.lon, b.lat) {
            by_cell[c].push(k);
        }
    }
    for v in by_cell.iter_mut() {
        v.sort_by(|&a, &b| {
            buildings[b]
                .insured_value
                .total_cmp(&buildings[a].insured_value)
                .then(buildings[a].building_id.cmp(&buildings[b].building_id))
        });
    }
    by_cell
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCovariates {
    pub buildings: Vec<BuildingRecord>,
    pub covariates: CovariateGrid,
    /// The day's line, `None` on quiet days.
    pub lines: Vec<Option<LineState>>,
}

/// Covariates for every catalog day, with the lines that shaped them.
pub fn simulate_covariates(config: &ScenarioConfig) -> SimulatedCovariates {
    let g = &config.grid;
    let n = g.n_cells();
    let buildings = simulate_buildings(config);
    let by_cell = buildings_by_cell(g, &buildings);
    let exposure: Vec<f64> = by_cell
        .iter()
        .map(|v| v.iter().map(|&k| buildings[k].insured_value).sum())
        .collect();
    let mean_exposure = exposure.iter().sum::<f64>() / n as f64;
    let cells = g.centroids();
    let noise_cov = build_covariance(
        Locations::Planar(&cells),
        &Kernel::Matern32(MaternParams {
            nu: 1.5,
            length_scale: config.storm.noise_length_km,
        }),
    )
    .expect("valid storm noise covariance");
    let s = &config.storm;
    let mut days = Vec::new();
    let mut lines = Vec::new();
    for (t, date) in catalog_dates(config).into_iter().enumerate() {
        let mut rng = config.rng(STREAM_HAZARD + t as u64);
        if rng.random::<f64>() < config.calendar.quiet_fraction {
            days.push(CovariateDay::zeros(date, n));
            lines.push(None);
            continue;
        }
        let wind = rng.random_range(s.wind_dir_deg.0..=s.wind_dir_deg.1);
        let line = draw_line(
            wind_to_line_angle(wind),
            config.theta_sd_deg,
            config.alpha_range(),
            config.counts.sigma_m,
            &mut rng,
        );
        let peak = rng.random_range(s.peak.0..=s.peak.1);
        let noise = noise_cov.sample(&vec![0.0; n], &mut rng);
        let mut day = CovariateDay::zeros(date, n);
        for i in 0..n {
            let d = distance_to_line(cells[i], &line);
            let h = peak * (-0.5 * (d / s.width_km).powi(2)).exp() * (s.noise_sd * noise[i] - 0.5 * s.noise_sd * s.noise_sd).exp();
            let meshs = 4.0 * (h - 0.5).max(0.0);
            day.poh[i] = 1.0 - (-3.0 * (h - 0.1).max(0.0)).exp();
            day.meshs[i] = meshs;
            day.exposure[i] = exposure[i];
            day.climada_count[i] = (config.impact.count_coef * meshs * meshs * exposure[i] / mean_exposure)
                .round()
                .min(by_cell[i].len() as f64);
            day.climada_value[i] = config.impact.value_coef * meshs * exposure[i];
            day.wind_dir[i] = wind;
        }
        days.push(day);
        lines.push(Some(line));
    }
    SimulatedCovariates {
        buildings,
        covariates: CovariateGrid {
            nx: g.nx,
            ny: g.ny,
            days,
        },
        lines,
    }
}

/// Latent value-model effects of a catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueLatents {
    pub chi: Vec<f64>,
    pub x_beta: Vec<f64>,
    pub x_sigma: Vec<f64>,
    pub eps_p: BTreeMap<(i32, u8), f64>,
}

/// Draws the cell effects and fields over `coarse` centroids and one
/// season effect per (year, half) in `years`.
pub fn draw_value_latents<R: Rng + ?Sized>(
    truth: &ValueTruth,
    coarse: &[(f64, f64)],
    years: std::ops::RangeInclusive<i32>,
    rng: &mut R,
) -> ValueLatents {
    let c = coarse.len();
    let chi_n = Normal::new(0.0, truth.chi_sd).expect("positive sd");
    let chi = (0..c).map(|_| chi_n.sample(rng)).collect();
    let beta_cov = build_covariance(
        Locations::LonLat(coarse),
        &Kernel::RationalQuadratic(RationalQuadParams {
            length_scale: truth.length_scale_beta,
            squared_distance: false,
        }),
    )
    .expect("valid body field covariance");
    let sigma_cov = build_covariance(
        Locations::LonLat(coarse),
        &Kernel::Matern32(MaternParams {
            nu: 1.5,
            length_scale: truth.length_scale_sigma,
        }),
    )
    .expect("valid tail field covariance");
    let x_beta = beta_cov.sample(&vec![0.0; c], rng);
    let x_sigma = sigma_cov.sample(&vec![0.0; c], rng);
    let eps_n = Normal::new(0.0, truth.eps_p_sd).expect("positive sd");
    let eps_p = years
        .flat_map(|y| [(y, 0u8), (y, 1u8)])
        .map(|k| (k, eps_n.sample(rng)))
        .collect();
    ValueLatents {
        chi,
        x_beta,
        x_sigma,
        eps_p,
    }
}

/// Two-part law of a claim under the truth and its latents.
pub fn value_law(truth: &ValueTruth, latents: &ValueLatents, standardizer: &Standardizer, ctx: &ClaimContext) -> ClaimValueLaw {
    let f = standardizer.features(ctx);
    let eps = latents.eps_p.get(&season_half(ctx.date)).copied().unwrap_or(0.0);
    let p = crate::value_model::exceedance_prob(&f, &truth.p, latents.chi[ctx.cell], eps);
    let eta_nu = truth.nu[0] + truth.nu[1] * f[0] + truth.nu[2] * f[1] + truth.nu[3] * f[3] + latents.x_beta[ctx.cell];
    let log_sigma = crate::value_model::log_sigma_link(&f, &truth.sigma, latents.x_sigma[ctx.cell]);
    ClaimValueLaw {
        p_exceed: p,
        nu_mean: crate::distributions::expit(eta_nu).clamp(1e-9, 1.0 - 1e-9),
        kappa: truth.kappa,
        sigma: log_sigma.exp(),
        xi: if is_hail_season(ctx.date) { truth.xi1 } else { truth.xi2 },
        threshold_u: truth.threshold_u,
    }
}

/// Coarse cell of every fine cell from `block × block` aggregation, and the
/// coarse centroids.
pub fn block_coarse_cells(grid: &GridSpec, block: usize) -> (Vec<usize>, Vec<(f64, f64)>) {
    let bx = grid.nx.div_ceil(block);
    let by = grid.ny.div_ceil(block);
    let map: Vec<usize> = (0..grid.n_cells())
        .map(|i| {
            let (cx, cy) = grid.coords(i);
            (cy / block) * bx + cx / block
        })
        .collect();
    let centroids = (0..bx * by)
        .map(|k| {
            let members: Vec<usize> = (0..grid.n_cells()).filter(|&i| map[i] == k).collect();
            let m = members.len() as f64;
            let (x, y) = members.iter().fold((0.0, 0.0), |(x, y), &i| {
                let c = grid.centroid(i);
                (x + c.x / m, y + c.y / m)
            });
            unproject(crate::geometry::PlanarPoint::new(x, y), grid.center_lon, grid.center_lat)
        })
        .collect();
    (map, centroids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedClaim {
    pub building_id: u64,
    pub cell: usize,
    /// Downscaled CLIMADA value `M^YC`.
    pub m_yc: f64,
    /// Residual `Z`.
    pub z: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDay {
    pub line: LineState,
    /// Latent count field `X(s, t)` and day noise.
    pub field: Vec<f64>,
    pub eps: f64,
    /// Model counts per cell, before capping at the cell's building count.
    pub counts: Vec<u64>,
    pub claims: Vec<SimulatedClaim>,
    /// Counts that exceeded the buildings available in their cell.
    pub capped: usize,
}

impl SimulatedDay {
    pub fn total_value(&self) -> f64 {
        self.claims.iter().map(|c| c.value).sum()
    }
}

/// Everything [`simulate_day`] needs besides the day itself.
pub struct DayContext<'a> {
    pub config: &'a ScenarioConfig,
    pub buildings: &'a [BuildingRecord],
    pub by_cell: Vec<Vec<usize>>,
    pub count_cov: CovarianceMatrix,
    pub coarse_of: Vec<usize>,
    pub latents: ValueLatents,
    pub standardizer: Standardizer,
}

impl<'a> DayContext<'a> {
    pub fn new(config: &'a ScenarioConfig, sim: &'a SimulatedCovariates) -> Self {
        let g = &config.grid;
        let cells = g.centroids();
        let count_cov = build_covariance(
            Locations::Planar(&cells),
            &Kernel::Matern32(MaternParams {
                nu: 1.5,
                length_scale: config.counts.length_scale_mu,
            }),
        )
        .expect("valid count field covariance");
        let (coarse_of, coarse) = block_coarse_cells(g, config.coarse_block);
        let mut rng = config.rng(STREAM_VALUE_LATENTS);
        let latents = draw_value_latents(
            &config.values,
            &coarse,
            config.calendar.first_year..=config.calendar.last_year,
            &mut rng,
        );
        // covariates are standardised over cells with hail on catalog days
        let contexts: Vec<ClaimContext> = sim
            .covariates
            .days
            .iter()
            .flat_map(|d| {
                (0..g.n_cells()).filter(|&i| d.poh[i] > 0.0).map(|i| ClaimContext {
                    date: d.date,
                    cell: coarse_of[i],
                    poh: d.poh[i],
                    meshs: d.meshs[i],
                    exposure: d.exposure[i],
                })
            })
            .collect();
        Self {
            config,
            buildings: &sim.buildings,
            by_cell: buildings_by_cell(g, &sim.buildings),
            count_cov,
            coarse_of,
            latents,
            standardizer: Standardizer::fit(&contexts),
        }
    }
}

/// Counts and claims of one storm day given its covariates and line.
pub fn simulate_day<R: Rng + ?Sized>(ctx: &DayContext<'_>, day: &CovariateDay, line: &LineState, rng: &mut R) -> SimulatedDay {
    let config = ctx.config;
    let cells = config.grid.centroids();
    let draw = draw_day_counts(
        &config.counts,
        &cells,
        &ctx.count_cov,
        line,
        &day.climada_count,
        is_hail_season(day.date),
        rng,
    );
    let mut claims = Vec::new();
    let mut capped = 0;
    for (i, &n) in draw.counts.iter().enumerate() {
        let members = &ctx.by_cell[i];
        if n as usize > members.len() {
            capped += 1;
        }
        let cctx = ClaimContext {
            date: day.date,
            cell: ctx.coarse_of[i],
            poh: day.poh[i],
            meshs: day.meshs[i],
            exposure: day.exposure[i],
        };
        let law = value_law(&config.values, &ctx.latents, &ctx.standardizer, &cctx);
        for &k in members.iter().take(n as usize) {
            let b = &ctx.buildings[k];
            let m_yc = downscale_climada_value(day.climada_value[i], day.exposure[i], b.insured_value);
            let z = law.sample_residual(rng);
            claims.push(SimulatedClaim {
                building_id: b.building_id,
                cell: i,
                m_yc,
                z,
                value: m_yc + z,
            });
        }
    }
    SimulatedDay {
        line: *line,
        field: draw.field,
        eps: draw.eps,
        counts: draw.counts,
        claims,
        capped,
    }
}

/// Full synthetic catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub config: ScenarioConfig,
    pub buildings: Vec<BuildingRecord>,
    pub covariates: CovariateGrid,
    /// Parallel to `covariates.days`; `None` on quiet days.
    pub days: Vec<Option<SimulatedDay>>,
    /// Reported claims (dates possibly jittered by a day).
    pub claims: Vec<ClaimRecord>,
}

/// One row of the truth file written next to a catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDayRow {
    pub date: NaiveDate,
    pub theta: f64,
    pub alpha: f64,
    pub n_claims: usize,
    pub total_value: f64,
}

pub fn simulate_catalog(config: &ScenarioConfig) -> Result<Catalog, SimulateError> {
    config.validate()?;
    let sim = simulate_covariates(config);
    let ctx = DayContext::new(config, &sim);
    let mut days = Vec::with_capacity(sim.covariates.days.len());
    let mut claims = Vec::new();
    for (t, (day, line)) in sim.covariates.days.iter().zip(&sim.lines).enumerate() {
        let Some(line) = line else {
            days.push(None);
            continue;
        };
        let mut rng = config.rng(STREAM_DAY + t as u64);
        let d = simulate_day(&ctx, day, line, &mut rng);
        for c in &d.claims {
            let shift = if rng.random::<f64>() < config.date_jitter_prob {
                if rng.random::<bool>() { 1 } else { -1 }
            } else {
                0
            };
            claims.push(ClaimRecord {
                claim_id: claims.len() as u64 + 1,
                building_id: c.building_id,
                date: day.date + chrono::Duration::days(shift),
                value: c.value,
            });
        }
        days.push(Some(d));
    }
    Ok(Catalog {
        config: config.clone(),
        buildings: sim.buildings,
        covariates: sim.covariates,
        days,
        claims,
    })
}

impl Catalog {
    pub fn truth_rows(&self) -> Vec<TruthDayRow> {
        self.covariates
            .days
            .iter()
            .zip(&self.days)
            .filter_map(|(c, d)| {
                d.as_ref().map(|d| TruthDayRow {
                    date: c.date,
                    theta: d.line.theta,
                    alpha: d.line.alpha,
                    n_claims: d.claims.len(),
                    total_value: d.total_value(),
                })
            })
            .collect()
    }

    /// Writes `buildings.csv`, `claims.csv`, `covariates.csv` and
    /// `truth_days.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SimulateError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut header = Header::with_seed(self.config.seed);
        let g = &self.config.grid;
        header.push("grid", format!("{} {} {} {} {}", g.center_lon, g.center_lat, g.cell_km, g.nx, g.ny));
        write_buildings(&dir.join("buildings.csv"), &header, &self.buildings)?;
        write_claims(&dir.join("claims.csv"), &header, &self.claims)?;
        write_covariates(&dir.join("covariates.csv"), &header, &self.covariates)?;
        write_records(&dir.join("truth_days.csv"), &header, &self.truth_rows())?;
        Ok(())
    }
}

/// Claims for a value-only study: `n_claims` claims spread over a 3×3 block
/// of coarse cells 10 km apart, years 2002–2015, covariates drawn directly.
/// Exposure comes from one of the nine fine cells under the claim's coarse
/// cell.
/// Covariates are standardised over the drawn claims, as the value fit does.
pub fn simulate_value_claims(truth: &ValueTruth, n_claims: usize, seed: u64) -> (Vec<(f64, f64)>, Vec<ValueClaim>, ValueLatents) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = (8.55, 47.40);
    let cells: Vec<(f64, f64)> = (0..9)
        .map(|k| {
            let p = crate::geometry::PlanarPoint::new(10.0 * ((k % 3) as f64 - 1.0), 10.0 * ((k / 3) as f64 - 1.0));
            unproject(p, origin.0, origin.1)
        })
        .collect();
    let latents = draw_value_latents(truth, &cells, 2002..=2015, &mut rng);
    // each coarse cell covers a 3×3 block of fine cells with their own exposure
    let exposure: Vec<[f64; 9]> = (0..9).map(|_| std::array::from_fn(|_| rng.random_range(2e7..2e8))).collect();
    let contexts: Vec<ClaimContext> = (0..n_claims)
        .map(|_| {
            let year = rng.random_range(2002..=2015);
            let doy = rng.random_range(0..183);
            let date = NaiveDate::from_ymd_opt(year, 4, 1).expect("valid date") + chrono::Duration::days(doy);
            let cell = rng.random_range(0..9);
            let poh: f64 = rng.random_range(0.3..1.0);
            ClaimContext {
                date,
                cell,
                poh,
                meshs: 4.0 * poh * rng.random::<f64>(),
                exposure: exposure[cell][rng.random_range(0..9)],
            }
        })
        .collect();
    let standardizer = Standardizer::fit(&contexts);
    let claims = contexts
        .iter()
        .map(|ctx| {
            let law = value_law(truth, &latents, &standardizer, ctx);
            ValueClaim {
                date: ctx.date,
                cell: ctx.cell,
                poh: ctx.poh,
                meshs: ctx.meshs,
                exposure: ctx.exposure,
                z: law.sample_residual(&mut rng),
            }
        })
        .collect();
    (cells, claims, latents)
}
