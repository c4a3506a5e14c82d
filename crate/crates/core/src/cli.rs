//! Command-line pipeline: simulate, preprocess, select-threshold,
//! fit-counts, fit-values, predict, evaluate, diagnose.
//!
//! Stages after `simulate` share a work directory. Every file written
//! carries the run seed and the grid in its `#` header. Errors are reported
//! as one line `error: kind=<kind> msg="..."` with a per-kind exit code.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::count_model::{
    draw_day_counts, draw_line, fit_counts, CountDesign, CountModelError, CountPosterior, CountPriors, CountScalars,
    N_SCALARS, SCALAR_NAMES,
};
use crate::data_io::{
    assign_cells, cluster_claim_dates, count_claims, downscale_climada_value, read_buildings, read_claims,
    read_covariates, read_header, read_posterior, read_records, season_filter, write_buildings, write_claims,
    write_covariates, write_posterior, write_records, BuildingRecord, ClaimRecord, CovariateGrid, DataError,
    GridSpec, Header, SplitYears, Subset,
};
use crate::evaluation::{
    combine_predictions, confusion_metrics, extremal_correlation, lsd, qq_points, render_confusion_table, skss,
    skss_terms, EvaluationError, SKSS_PATCH,
};
use crate::geometry::{wind_to_line_angle, PlanarPoint};
use crate::kernels::{build_covariance, Locations};
use crate::samplers::{
    autocorrelation, clt_band, effective_sample_size, quantile_sorted, split_rhat, ChainDraws, DemcConfig,
    NutsConfig, PosteriorSamples, SamplerError,
};
use crate::simulate::{buildings_by_cell, simulate_catalog, ScenarioConfig, SimulateError};
use crate::threshold::{default_grid, select_threshold, ThresholdError, DEFAULT_THRESHOLD_U};
use crate::value_model::{
    build_coarse_grid, fit_values, ClaimContext, ClaimValueLaw, CoarseGrid, ValueClaim, ValueDesign, ValueFit,
    ValueModelError, ValuePriors,
};

/// Scenario used by `simulate` when no `--config` is given.
pub const SMALL_SCENARIO: &str = include_str!("../scenarios/small.toml");

// ---------------------------------------------------------------------------
// errors

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Sampler(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Config(_) => "config",
            Self::Data(_) => "data",
            Self::Sampler(_) => "sampler",
            Self::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Config(_) => 3,
            Self::Data(_) => 4,
            Self::Sampler(_) => 5,
            Self::Io(_) => 6,
        }
    }

    /// `error: kind=<kind> msg="<message>"` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ").replace('"', "'");
        format!("error: kind={} msg=\"{msg}\"", self.kind())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<SimulateError> for CliError {
    fn from(e: SimulateError) -> Self {
        match e {
            SimulateError::Data(d) => d.into(),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Config(_) => Self::Config(e.to_string()),
            _ => Self::Sampler(e.to_string()),
        }
    }
}

impl From<CountModelError> for CliError {
    fn from(e: CountModelError) -> Self {
        match e {
            CountModelError::Sampler(s) => s.into(),
            CountModelError::FitQuality(_) | CountModelError::NonFinite(_) => Self::Sampler(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<ValueModelError> for CliError {
    fn from(e: ValueModelError) -> Self {
        match e {
            ValueModelError::Sampler(s) => s.into(),
            ValueModelError::FitQuality(_) => Self::Sampler(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<ThresholdError> for CliError {
    fn from(e: ThresholdError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<EvaluationError> for CliError {
    fn from(e: EvaluationError) -> Self {
        Self::Data(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// run configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub tuning_iters: usize,
    pub draw_iters: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            tuning_iters: 500,
            draw_iters: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemcSettings {
    pub n_chains: usize,
    pub tuning_iters: usize,
    pub draw_iters: usize,
    pub snooker_prob: f64,
}

impl Default for DemcSettings {
    fn default() -> Self {
        Self {
            n_chains: 3,
            tuning_iters: 500,
            draw_iters: 1000,
            snooker_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountSettings {
    pub theta_sd_deg: f64,
    /// Defaults to 20 km.
    pub alpha_margin_km: Option<f64>,
}

impl Default for CountSettings {
    fn default() -> Self {
        Self {
            theta_sd_deg: 15.0,
            alpha_margin_km: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueSettings {
    /// Fine cells per side of a coarse cell before merging.
    pub coarse_block: usize,
    pub min_claims: usize,
    /// Fixed threshold on the `log(1 + Z)` scale; otherwise the output of
    /// `select-threshold`, otherwise the shipped default.
    pub threshold: Option<f64>,
}

impl Default for ValueSettings {
    fn default() -> Self {
        Self {
            coarse_block: 3,
            min_claims: 30,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSettings {
    pub count_draws: usize,
    pub value_draws: usize,
}

impl Default for PredictSettings {
    fn default() -> Self {
        Self {
            count_draws: 32,
            value_draws: 32,
        }
    }
}

/// Settings shared by the pipeline stages, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub chains: Option<usize>,
    pub split: SplitYears,
    pub nuts: SamplerSettings,
    pub demc: DemcSettings,
    pub counts: CountSettings,
    pub values: ValueSettings,
    pub predict: PredictSettings,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let c: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.split.train_end > self.split.validation_end {
            return bad("split.train_end must not exceed split.validation_end");
        }
        if self.nuts.draw_iters == 0 || self.demc.draw_iters == 0 || self.demc.n_chains == 0 {
            return bad("sampler draw counts and DE-MC chains must be positive");
        }
        if self.predict.count_draws == 0 || self.predict.value_draws == 0 {
            return bad("predict draws must be positive");
        }
        if self.values.coarse_block == 0 {
            return bad("values.coarse_block must be positive");
        }
        Ok(())
    }

    fn apply(&mut self, o: &Common) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(c) = o.chains {
            self.chains = Some(c);
        }
        if let Some(t) = o.tuning {
            self.nuts.tuning_iters = t;
            self.demc.tuning_iters = t;
        }
        if let Some(d) = o.draws {
            self.nuts.draw_iters = d;
            self.demc.draw_iters = d;
        }
    }

    pub fn nuts_config(&self) -> NutsConfig {
        NutsConfig {
            tuning_iters: self.nuts.tuning_iters,
            draw_iters: self.nuts.draw_iters,
            target_accept: self.nuts.target_accept,
            max_tree_depth: self.nuts.max_tree_depth,
            n_chains: self.chains.unwrap_or(1),
            seed: self.seed,
        }
    }

    pub fn demc_config(&self) -> DemcConfig {
        DemcConfig {
            n_chains: self.chains.unwrap_or(self.demc.n_chains).max(3),
            snooker_prob: self.demc.snooker_prob,
            tuning_iters: self.demc.tuning_iters,
            draw_iters: self.demc.draw_iters,
            seed: self.seed,
            ..DemcConfig::default()
        }
    }
}

// ---------------------------------------------------------------------------
// argument grammar

#[derive(Debug, Parser)]
#[command(name = "hailline", version, about = "Random-line hail damage model pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run configuration (TOML) [default: built-in settings]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Work directory shared by the pipeline stages
    #[arg(long, default_value = "work")]
    pub work: PathBuf,
    /// Master seed; overrides the configuration [default: config value, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Independent sampler chains [default: config value, else 1]
    #[arg(long)]
    pub chains: Option<usize>,
    /// Tuning iterations per chain [default: config value, else 500]
    #[arg(long)]
    pub tuning: Option<usize>,
    /// Retained draws per chain [default: config value, else 1000]
    #[arg(long)]
    pub draws: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SubsetArg {
    Train,
    Validation,
    Test,
}

impl From<SubsetArg> for Subset {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::Train => Subset::Train,
            SubsetArg::Validation => Subset::Validation,
            SubsetArg::Test => Subset::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic catalog from a scenario file
    Simulate {
        /// Scenario (TOML) [default: bundled small scenario]
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the catalog CSVs
        #[arg(long, default_value = "catalog")]
        out: PathBuf,
        /// Overrides the scenario seed [default: scenario value]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Season filter, claim-date clustering and residuals into the work directory
    Preprocess {
        /// Directory with buildings.csv, claims.csv and covariates.csv
        #[arg(long, default_value = "catalog")]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Threshold scan on training residuals
    SelectThreshold {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the claim-count model on training days
    FitCounts {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the claim-value model on training claims
    FitValues {
        #[command(flatten)]
        common: Common,
    },
    /// Damage predictions for one subset of days
    Predict {
        /// Days to predict
        #[arg(long, value_enum, default_value = "test")]
        subset: SubsetArg,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics and a text report for the predictions
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Autocorrelation, trace and convergence summaries of the fitted posteriors
    Diagnose {
        /// Largest autocorrelation lag
        #[arg(long, default_value_t = 40)]
        max_lag: usize,
        /// Keep every k-th draw in the trace file
        #[arg(long, default_value_t = 1)]
        thin: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            let err = CliError::Usage(first.to_string());
            eprintln!("{}", err.line());
            return err.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { config, out, seed } => cmd_simulate(config.as_deref(), &out, seed),
        Command::Preprocess { data, common } => {
            let cfg = load(&common)?;
            cmd_preprocess(&data, &common.work, &cfg)
        }
        Command::SelectThreshold { common } => cmd_select_threshold(&common.work, &load(&common)?),
        Command::FitCounts { common } => cmd_fit_counts(&common.work, &load(&common)?),
        Command::FitValues { common } => cmd_fit_values(&common.work, &load(&common)?),
        Command::Predict { subset, common } => cmd_predict(&common.work, &load(&common)?, subset.into()),
        Command::Evaluate { common } => cmd_evaluate(&common.work, &load(&common)?),
        Command::Diagnose { max_lag, thin, common } => cmd_diagnose(&common.work, &load(&common)?, max_lag, thin.max(1)),
    }
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply(common);
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// shared plumbing

fn header(seed: u64, grid: &GridSpec) -> Header {
    let mut h = Header::with_seed(seed);
    h.push("grid", grid_string(grid));
    h
}

fn grid_string(g: &GridSpec) -> String {
    format!("{} {} {} {} {}", g.center_lon, g.center_lat, g.cell_km, g.nx, g.ny)
}

/// Grid recorded in a file header by `simulate` or `preprocess`.
pub fn read_grid(path: &Path) -> Result<GridSpec, CliError> {
    let h = read_header(path)?;
    let raw = h
        .get("grid")
        .ok_or_else(|| CliError::Data(format!("{}: header lacks a grid line", path.display())))?;
    let parts: Vec<&str> = raw.split_whitespace().collect();
    let bad = || CliError::Data(format!("{}: malformed grid header `{raw}`", path.display()));
    if parts.len() != 5 {
        return Err(bad());
    }
    let f = |i: usize| parts[i].parse::<f64>().map_err(|_| bad());
    let u = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
    let grid = GridSpec {
        center_lon: f(0)?,
        center_lat: f(1)?,
        cell_km: f(2)?,
        nx: u(3)?,
        ny: u(4)?,
    };
    grid.validate()?;
    Ok(grid)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn need(path: PathBuf) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Io(format!("{}: not found (run the earlier pipeline stage first)", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Claim prepared for the value model: covariates of its cell-day and the
/// residual over the downscaled CLIMADA value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedClaim {
    pub claim_id: u64,
    pub building_id: u64,
    pub date: NaiveDate,
    pub cell: usize,
    pub poh: f64,
    pub meshs: f64,
    pub exposure: f64,
    pub m_yc: f64,
    pub z: f64,
}

struct Work {
    grid: GridSpec,
    buildings: Vec<BuildingRecord>,
    claims: Vec<ClaimRecord>,
    covariates: CovariateGrid,
}

impl Work {
    fn load(dir: &Path) -> Result<Self, CliError> {
        let bpath = need(dir.join("buildings.csv"))?;
        Ok(Self {
            grid: read_grid(&bpath)?,
            buildings: read_buildings(&bpath)?,
            claims: read_claims(&need(dir.join("claims.csv"))?)?,
            covariates: read_covariates(&need(dir.join("covariates.csv"))?)?,
        })
    }

    fn building_cells(&self) -> BTreeMap<u64, usize> {
        self.buildings
            .iter()
            .zip(assign_cells(&self.buildings, &self.grid))
            .filter_map(|(b, c)| c.map(|c| (b.building_id, c)))
            .collect()
    }

    fn subset_grid(&self, split: SplitYears, subset: Subset) -> CovariateGrid {
        CovariateGrid {
            nx: self.covariates.nx,
            ny: self.covariates.ny,
            days: self.covariates.days.iter().filter(|d| split.subset(d.date) == subset).cloned().collect(),
        }
    }
}

fn alpha_range(grid: &GridSpec, cfg: &RunConfig) -> (f64, f64) {
    let margin = cfg.counts.alpha_margin_km.unwrap_or(CountPriors::for_cell_size(grid.cell_km).alpha_margin_km);
    let (lo, hi) = grid.y_extent();
    (lo - margin, hi + margin)
}

fn count_priors(grid: &GridSpec, cfg: &RunConfig) -> CountPriors {
    let mut p = CountPriors::for_cell_size(grid.cell_km);
    p.theta_sd_deg = cfg.counts.theta_sd_deg;
    if let Some(m) = cfg.counts.alpha_margin_km {
        p.alpha_margin_km = m;
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SummaryRow {
    model: String,
    parameter: String,
    mean: f64,
    sd: f64,
    q025: f64,
    q975: f64,
    ess: f64,
    rhat: f64,
}

fn summarize(model: &str, s: &PosteriorSamples) -> Vec<SummaryRow> {
    (0..s.n_params())
        .map(|i| {
            let all = s.column(i);
            let n = all.len() as f64;
            let mean = all.iter().sum::<f64>() / n;
            let sd = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            let chains: Vec<Vec<f64>> = (0..s.n_chains()).map(|c| s.chain_column(c, i)).collect();
            let (q025, q975) = s.interval(i, 0.95);
            SummaryRow {
                model: model.to_string(),
                parameter: s.names[i].clone(),
                mean,
                sd,
                q025,
                q975,
                ess: chains.iter().map(|c| effective_sample_size(c)).sum(),
                rhat: split_rhat(&chains),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut scenario = match config {
        Some(p) => ScenarioConfig::from_path(p)?,
        None => ScenarioConfig::from_toml_str(SMALL_SCENARIO)?,
    };
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let catalog = simulate_catalog(&scenario)?;
    catalog.write(out)?;
    let text = toml::to_string(&scenario).map_err(|e| CliError::Config(e.to_string()))?;
    write_text(&out.join("scenario.toml"), &text)?;
    log::info!(
        "simulated {} days, {} buildings, {} claims into {}",
        catalog.covariates.days.len(),
        catalog.buildings.len(),
        catalog.claims.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// preprocess

fn cmd_preprocess(data: &Path, work: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let bpath = need(data.join("buildings.csv"))?;
    let grid = read_grid(&bpath)?;
    let buildings = read_buildings(&bpath)?;
    let claims = read_claims(&need(data.join("claims.csv"))?)?;
    let covariates = read_covariates(&need(data.join("covariates.csv"))?)?;
    if covariates.nx != grid.nx || covariates.ny != grid.ny {
        return Err(CliError::Data(format!(
            "covariates are {}x{} cells but the grid is {}x{}",
            covariates.nx, covariates.ny, grid.nx, grid.ny
        )));
    }

    let season = season_filter(&claims);
    log::info!("season filter: dropped {} claims outside April-September", season.dropped);
    let clustered = cluster_claim_dates(&season.claims, &buildings, &grid, &covariates);
    log::info!(
        "date clustering: moved {} claims, {} claims without a usable POH window",
        clustered.moved,
        clustered.flagged.len()
    );

    let cells: BTreeMap<u64, (usize, f64)> = buildings
        .iter()
        .zip(assign_cells(&buildings, &grid))
        .filter_map(|(b, c)| c.map(|c| (b.building_id, (c, b.insured_value))))
        .collect();
    let mut prepared = Vec::new();
    let (mut off_grid, mut no_day, mut non_positive) = (0, 0, 0);
    for c in &clustered.claims {
        let Some(&(cell, insured)) = cells.get(&c.building_id) else {
            off_grid += 1;
            continue;
        };
        let Some(day) = covariates.day(c.date) else {
            no_day += 1;
            continue;
        };
        let m_yc = downscale_climada_value(day.climada_value[cell], day.exposure[cell], insured);
        let z = c.value - m_yc;
        if !(z > 0.0) {
            non_positive += 1;
            continue;
        }
        prepared.push(PreparedClaim {
            claim_id: c.claim_id,
            building_id: c.building_id,
            date: c.date,
            cell,
            poh: day.poh[cell],
            meshs: day.meshs[cell],
            exposure: day.exposure[cell],
            m_yc,
            z,
        });
    }
    log::info!(
        "value claims: kept {}, skipped {off_grid} off-grid, {no_day} on days without covariates, {non_positive} with non-positive residual",
        prepared.len()
    );

    ensure_dir(work)?;
    let h = header(cfg.seed, &grid);
    write_buildings(&work.join("buildings.csv"), &h, &buildings)?;
    write_claims(&work.join("claims.csv"), &h, &clustered.claims)?;
    write_covariates(&work.join("covariates.csv"), &h, &covariates)?;
    write_records(&work.join("value_claims.csv"), &h, &prepared)?;
    Ok(())
}

fn read_prepared(work: &Path) -> Result<Vec<PreparedClaim>, CliError> {
    Ok(read_records(&need(work.join("value_claims.csv"))?)?)
}

// ---------------------------------------------------------------------------
// threshold

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ThresholdRow {
    threshold: f64,
    n_exceedances: usize,
}

fn cmd_select_threshold(work: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let grid = read_grid(&need(work.join("buildings.csv"))?)?;
    let values: Vec<f64> = read_prepared(work)?
        .iter()
        .filter(|c| cfg.split.subset(c.date) == Subset::Train)
        .map(|c| c.z.ln_1p())
        .collect();
    let scan = select_threshold(&values, &default_grid(&values))?;
    let h = header(cfg.seed, &grid);
    write_records(&work.join("threshold_scan.csv"), &h, &scan.rows)?;
    let row = scan.selected_row();
    write_records(
        &work.join("threshold.csv"),
        &h,
        &[ThresholdRow {
            threshold: row.threshold,
            n_exceedances: row.n_exceedances,
        }],
    )?;
    log::info!("selected threshold u = {:.4} with {} exceedances", row.threshold, row.n_exceedances);
    Ok(())
}

fn threshold_for(work: &Path, cfg: &RunConfig) -> Result<f64, CliError> {
    if let Some(u) = cfg.values.threshold {
        return Ok(u);
    }
    let path = work.join("threshold.csv");
    if path.exists() {
        let rows: Vec<ThresholdRow> = read_records(&path)?;
        if let Some(r) = rows.first() {
            return Ok(r.threshold);
        }
    }
    Ok(DEFAULT_THRESHOLD_U)
}

// ---------------------------------------------------------------------------
// count fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LineRow {
    date: NaiveDate,
    /// Axial mean of the line angle, radians.
    theta_mean: f64,
    alpha_mean: f64,
    alpha_sd: f64,
}

fn cmd_fit_counts(work: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let w = Work::load(work)?;
    let train = w.subset_grid(cfg.split, Subset::Train);
    let (design, kept) = CountDesign::from_covariates(&w.grid, &train, count_priors(&w.grid, cfg));
    let all_counts = count_claims(&w.claims, &w.building_cells(), &train);
    let counts: Vec<Vec<u64>> = kept.iter().map(|&t| all_counts[t].clone()).collect();
    log::info!("count fit: {} training days with hail signal, {} cells", design.days.len(), design.n_cells());
    let fit = fit_counts(design, counts, &cfg.nuts_config())?;

    let s = &fit.samples;
    let scalars = PosteriorSamples {
        names: SCALAR_NAMES.iter().map(|n| n.to_string()).collect(),
        chains: s
            .chains
            .iter()
            .map(|c| ChainDraws {
                draws: c.draws.iter().map(|d| d[..N_SCALARS].to_vec()).collect(),
                accept_rate: c.accept_rate,
                divergences: c.divergences,
                step_size: c.step_size,
            })
            .collect(),
        seed: s.seed,
    };
    let h = header(cfg.seed, &w.grid);
    write_posterior(&work.join("count_posterior.csv"), &h, &scalars)?;
    write_records(&work.join("count_summary.csv"), &h, &summarize("counts", &scalars))?;

    let post = &fit.posterior;
    let mut sums = vec![(0.0, 0.0, 0.0, 0.0); post.design.days.len()];
    let mut n = 0.0;
    for u in s.iter_draws() {
        let p = post.params_from(u)?;
        for (acc, d) in sums.iter_mut().zip(&p.days) {
            acc.0 += (2.0 * d.theta).sin();
            acc.1 += (2.0 * d.theta).cos();
            acc.2 += d.alpha_offset;
            acc.3 += d.alpha_offset * d.alpha_offset;
        }
        n += 1.0;
    }
    let lines: Vec<LineRow> = post
        .design
        .days
        .iter()
        .zip(&sums)
        .map(|(d, &(sn, cs, a, a2))| {
            let mean = a / n;
            LineRow {
                date: d.date,
                theta_mean: 0.5 * sn.atan2(cs),
                alpha_mean: mean,
                alpha_sd: (a2 / n - mean * mean).max(0.0).sqrt(),
            }
        })
        .collect();
    write_records(&work.join("count_lines.csv"), &h, &lines)?;
    log::info!(
        "count fit: {} draws, divergence rate {:.3}",
        s.n_draws() * s.n_chains(),
        s.divergence_rate()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// value fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CoarseRow {
    fine_cell: usize,
    coarse_cell: usize,
}

/// Value design from the training claims; deterministic, so `predict`
/// rebuilds exactly what `fit-values` fitted.
fn value_design(work: &Path, cfg: &RunConfig, grid: &GridSpec) -> Result<(ValueDesign, CoarseGrid), CliError> {
    let train: Vec<PreparedClaim> = read_prepared(work)?
        .into_iter()
        .filter(|c| cfg.split.subset(c.date) == Subset::Train)
        .collect();
    let fine: Vec<(f64, f64)> = (0..grid.n_cells()).map(|i| grid.centroid_lonlat(i)).collect();
    let mut per_fine = vec![0usize; grid.n_cells()];
    for c in &train {
        if c.cell < per_fine.len() {
            per_fine[c.cell] += 1;
        }
    }
    let coarse = build_coarse_grid(grid.nx, grid.ny, &fine, &per_fine, cfg.values.coarse_block, cfg.values.min_claims);
    let claims: Vec<ValueClaim> = train
        .iter()
        .filter(|c| c.cell < grid.n_cells())
        .map(|c| ValueClaim {
            date: c.date,
            cell: coarse.fine_to_coarse[c.cell],
            poh: c.poh,
            meshs: c.meshs,
            exposure: c.exposure,
            z: c.z,
        })
        .collect();
    let u = threshold_for(work, cfg)?;
    let design = ValueDesign::new(coarse.centroids.clone(), claims, u, true, ValuePriors::default())?;
    Ok((design, coarse))
}

const VALUE_PARTS: [&str; 3] = ["exceedance", "body", "tail"];

fn cmd_fit_values(work: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let grid = read_grid(&need(work.join("buildings.csv"))?)?;
    let (design, coarse) = value_design(work, cfg, &grid)?;
    log::info!(
        "value fit: {} training claims, {} coarse cells, threshold {:.4}",
        design.claims.len(),
        design.n_cells(),
        design.threshold_u
    );
    let fit = fit_values(design, &cfg.nuts_config(), &cfg.demc_config())?;
    let h = header(cfg.seed, &grid);
    let mut summary = Vec::new();
    for (name, s) in VALUE_PARTS.iter().zip([&fit.exceedance, &fit.body, &fit.tail]) {
        write_posterior(&work.join(format!("value_{name}.csv")), &h, s)?;
        summary.extend(summarize(name, s));
    }
    write_records(&work.join("value_summary.csv"), &h, &summary)?;
    let rows: Vec<CoarseRow> = coarse
        .fine_to_coarse
        .iter()
        .enumerate()
        .map(|(fine_cell, &coarse_cell)| CoarseRow { fine_cell, coarse_cell })
        .collect();
    write_records(&work.join("coarse_grid.csv"), &h, &rows)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// predict

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedDay {
    pub date: NaiveDate,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub mean_claims: f64,
    pub observed_claims: u64,
    pub observed_total: f64,
    pub climada_total: f64,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedCell {
    pub date: NaiveDate,
    pub cell: usize,
    pub mean_claims: f64,
    pub p_claim: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub observed_claims: u64,
    pub observed_value: f64,
    pub climada_count: f64,
    pub climada_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictedBuilding {
    date: NaiveDate,
    building_id: u64,
    mean: f64,
    lower: f64,
    upper: f64,
}

fn spread(k: usize, n: usize, total: usize) -> usize {
    k * total / n
}

fn cmd_predict(work: &Path, cfg: &RunConfig, subset: Subset) -> Result<(), CliError> {
    let w = Work::load(work)?;
    let grid = &w.grid;
    let counts_post = read_posterior(&need(work.join("count_posterior.csv"))?)?;
    if counts_post.n_params() != N_SCALARS || counts_post.n_draws() == 0 {
        return Err(CliError::Data("count_posterior.csv does not hold the count-model scalars".into()));
    }
    let (design, coarse) = value_design(work, cfg, grid)?;
    let mut parts = Vec::new();
    for name in VALUE_PARTS {
        parts.push(read_posterior(&need(work.join(format!("value_{name}.csv")))?)?);
    }
    let tail = parts.pop().expect("three parts");
    let body = parts.pop().expect("three parts");
    let exceedance = parts.pop().expect("three parts");
    let fit = ValueFit {
        design,
        exceedance,
        body,
        tail,
    };

    let cells = grid.centroids();
    let by_cell = buildings_by_cell(grid, &w.buildings);
    let insured: Vec<f64> = w.buildings.iter().map(|b| b.insured_value).collect();
    let building_cells = w.building_cells();
    let arange = alpha_range(grid, cfg);
    let count_draws: Vec<&[f64]> = counts_post.iter_draws().collect();
    let value_total = fit.exceedance.n_draws() * fit.exceedance.n_chains();
    let (n, m) = (cfg.predict.count_draws, cfg.predict.value_draws);

    let mut observed: BTreeMap<NaiveDate, Vec<(u64, f64)>> = BTreeMap::new();
    for c in &w.claims {
        if let Some(&cell) = building_cells.get(&c.building_id) {
            let day = observed.entry(c.date).or_insert_with(|| vec![(0, 0.0); grid.n_cells()]);
            day[cell].0 += 1;
            day[cell].1 += c.value;
        }
    }
    let prepared = read_prepared(work)?;

    let mut day_rows = Vec::new();
    let mut cell_rows = Vec::new();
    let mut building_rows = Vec::new();
    let mut pits = Vec::new();
    for (t, day) in w.covariates.days.iter().enumerate() {
        if cfg.split.subset(day.date) != subset || !day.is_active() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(t as u64);
        let wind = wind_to_line_angle(day.mean_wind_dir());
        let hail_season = crate::data_io::is_hail_season(day.date);

        let mut counts = Vec::with_capacity(n);
        for k in 0..n {
            let s = CountScalars::from_unconstrained(count_draws[spread(k, n, count_draws.len())]);
            let cov = build_covariance(Locations::Planar(&cells), &CountPosterior::kernel(s.length_scale_mu))
                .map_err(|e| CliError::Sampler(format!("count field covariance: {e}")))?;
            let line = draw_line(wind, cfg.counts.theta_sd_deg, arange, s.sigma_m, &mut rng);
            counts.push(draw_day_counts(&s, &cells, &cov, &line, &day.climada_count, hail_season, &mut rng).counts);
        }

        let context = |i: usize| ClaimContext {
            date: day.date,
            cell: coarse.fine_to_coarse[i],
            poh: day.poh[i],
            meshs: day.meshs[i],
            exposure: day.exposure[i],
        };
        let needed: Vec<bool> = (0..cells.len()).map(|i| counts.iter().any(|c| c[i] > 0)).collect();
        let mut laws: Vec<Vec<Option<ClaimValueLaw>>> = vec![vec![None; cells.len()]; m];
        let mut values = vec![vec![0.0; w.buildings.len()]; m];
        for j in 0..m {
            let draw = spread(j, m, value_total);
            for i in (0..cells.len()).filter(|&i| needed[i]) {
                let law = fit.law_for(&context(i), draw, &mut rng);
                for &b in &by_cell[i] {
                    let m_yc = downscale_climada_value(day.climada_value[i], day.exposure[i], insured[b]);
                    values[j][b] = m_yc + law.sample_residual(&mut rng);
                }
                laws[j][i] = Some(law);
            }
        }
        let pred = combine_predictions(&counts, &values, &insured, &by_cell)?;

        for c in prepared.iter().filter(|c| c.date == day.date && c.cell < cells.len()) {
            let mut acc = 0.0;
            for (j, row) in laws.iter_mut().enumerate() {
                let law = match row[c.cell] {
                    Some(l) => l,
                    None => {
                        let l = fit.law_for(&context(c.cell), spread(j, m, value_total), &mut rng);
                        row[c.cell] = Some(l);
                        l
                    }
                };
                acc += law.residual_cdf(c.z);
            }
            pits.push(acc / m as f64);
        }

        let obs = observed.get(&day.date);
        let mut mean_claims_total = 0.0;
        for i in 0..cells.len() {
            let cap = by_cell[i].len() as f64;
            let mean_claims = counts.iter().map(|c| (c[i] as f64).min(cap)).sum::<f64>() / n as f64;
            mean_claims_total += mean_claims;
            let (oc, ov) = obs.map_or((0, 0.0), |o| o[i]);
            let s = pred.cells[i];
            cell_rows.push(PredictedCell {
                date: day.date,
                cell: i,
                mean_claims,
                p_claim: counts.iter().filter(|c| c[i] > 0).count() as f64 / n as f64,
                mean: s.mean,
                lower: s.lower,
                upper: s.upper,
                observed_claims: oc,
                observed_value: ov,
                climada_count: day.climada_count[i],
                climada_value: day.climada_value[i],
            });
        }
        for (b, s) in pred.buildings.iter().enumerate() {
            if s.mean > 0.0 {
                building_rows.push(PredictedBuilding {
                    date: day.date,
                    building_id: w.buildings[b].building_id,
                    mean: s.mean,
                    lower: s.lower,
                    upper: s.upper,
                });
            }
        }
        day_rows.push(PredictedDay {
            date: day.date,
            mean: pred.total.mean,
            lower: pred.total.lower,
            upper: pred.total.upper,
            mean_claims: mean_claims_total,
            observed_claims: obs.map_or(0, |o| o.iter().map(|x| x.0).sum()),
            observed_total: obs.map_or(0.0, |o| o.iter().map(|x| x.1).sum()),
            climada_total: day.climada_value.iter().sum(),
            clamped: pred.clamped,
        });
    }
    if day_rows.is_empty() {
        return Err(CliError::Data(format!("no {subset:?} day with a hail signal to predict")));
    }

    let mut h = header(cfg.seed, grid);
    h.push("subset", format!("{subset:?}").to_lowercase());
    h.push("composites", n * m);
    write_records(&work.join("predicted_days.csv"), &h, &day_rows)?;
    write_records(&work.join("predicted_cells.csv"), &h, &cell_rows)?;
    write_records(&work.join("predicted_buildings.csv"), &h, &building_rows)?;
    #[derive(Serialize)]
    struct QqRow {
        theoretical: f64,
        empirical: f64,
    }
    let qq: Vec<QqRow> = qq_points(&pits, |p| p)
        .into_iter()
        .map(|(theoretical, empirical)| QqRow { theoretical, empirical })
        .collect();
    write_records(&work.join("value_qq.csv"), &h, &qq)?;
    log::info!("predicted {} days from {} composite samples each", day_rows.len(), n * m);
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub far: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub skss: f64,
    pub skss_patch_mean: f64,
    pub lsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorrelogramRow {
    distance_lo: f64,
    distance_hi: f64,
    n_pairs: usize,
    rho_mean: Option<f64>,
    rho_lo: Option<f64>,
    rho_hi: Option<f64>,
    pi_mean: Option<f64>,
    pi_lo: Option<f64>,
    pi_hi: Option<f64>,
}

fn cmd_evaluate(work: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let grid = read_grid(&need(work.join("buildings.csv"))?)?;
    let cells: Vec<PredictedCell> = read_records(&need(work.join("predicted_cells.csv"))?)?;
    let days: Vec<PredictedDay> = read_records(&need(work.join("predicted_days.csv"))?)?;
    let n_cells = grid.n_cells();
    let mut by_day: BTreeMap<NaiveDate, Vec<&PredictedCell>> = BTreeMap::new();
    for c in &cells {
        if c.cell >= n_cells {
            return Err(CliError::Data(format!("predicted cell {} outside the grid", c.cell)));
        }
        by_day.entry(c.date).or_default().push(c);
    }
    let as_map = |rows: &[&PredictedCell], f: &dyn Fn(&PredictedCell) -> f64| {
        let mut m = DMatrix::zeros(grid.ny, grid.nx);
        for r in rows {
            let (x, y) = grid.coords(r.cell);
            m[(y, x)] = f(r);
        }
        m
    };
    let mut observed_maps = Vec::new();
    let mut model_maps = Vec::new();
    let mut climada_maps = Vec::new();
    let mut observed_pos = Vec::new();
    let mut model_pos = Vec::new();
    let mut climada_pos = Vec::new();
    for rows in by_day.values() {
        observed_maps.push(as_map(rows, &|r| r.observed_value));
        model_maps.push(as_map(rows, &|r| r.mean));
        climada_maps.push(as_map(rows, &|r| r.climada_value));
        observed_pos.push(rows.iter().map(|r| r.observed_claims > 0).collect::<Vec<_>>());
        model_pos.push(rows.iter().map(|r| r.mean_claims >= 0.5).collect::<Vec<_>>());
        climada_pos.push(rows.iter().map(|r| r.climada_count >= 0.5).collect::<Vec<_>>());
    }

    let mut metrics = Vec::new();
    for (name, pos, maps) in [("Model", &model_pos, &model_maps), ("CLIMADA", &climada_pos, &climada_maps)] {
        let conf = confusion_metrics(pos, &observed_pos)?;
        let terms = skss_terms(&observed_maps, maps, SKSS_PATCH)?;
        metrics.push(MetricRow {
            model: name.to_string(),
            a: conf.a,
            b: conf.b,
            c: conf.c,
            d: conf.d,
            far: conf.far,
            sensitivity: conf.sensitivity,
            specificity: conf.specificity,
            ppv: conf.ppv,
            skss: skss(&observed_maps, maps, SKSS_PATCH)?,
            skss_patch_mean: terms.iter().sum::<f64>() / terms.len() as f64,
            lsd: lsd(&observed_maps, maps)?,
        });
    }
    let covered = days.iter().filter(|d| d.lower <= d.observed_total && d.observed_total <= d.upper).count();
    let coverage = 100.0 * covered as f64 / days.len().max(1) as f64;

    let h = header(cfg.seed, &grid);
    write_records(&work.join("metrics.csv"), &h, &metrics)?;

    let series: Vec<Vec<f64>> = (0..n_cells)
        .map(|i| observed_maps.iter().map(|m| {
            let (x, y) = grid.coords(i);
            m[(y, x)]
        }).collect())
        .collect();
    let mut positive: Vec<f64> = series.iter().flatten().copied().filter(|v| *v > 0.0).collect();
    let mut correlogram = Vec::new();
    if n_cells >= 2 && !positive.is_empty() {
        positive.sort_by(f64::total_cmp);
        let u = quantile_sorted(&positive, 0.5);
        let positions: Vec<PlanarPoint> = grid.centroids();
        let max_d = grid.cell_km * ((grid.nx * grid.nx + grid.ny * grid.ny) as f64).sqrt();
        let edges: Vec<f64> = (0..=((max_d / grid.cell_km).ceil() as usize)).map(|k| k as f64 * grid.cell_km).collect();
        let c = extremal_correlation(&series, &positions, u, &edges)?;
        correlogram = c
            .bins
            .iter()
            .map(|b| CorrelogramRow {
                distance_lo: b.lo,
                distance_hi: b.hi,
                n_pairs: b.n_pairs,
                rho_mean: b.rho.map(|s| s.mean),
                rho_lo: b.rho.map(|s| s.lower),
                rho_hi: b.rho.map(|s| s.upper),
                pi_mean: b.pi.map(|s| s.mean),
                pi_lo: b.pi.map(|s| s.lower),
                pi_hi: b.pi.map(|s| s.upper),
            })
            .collect();
    }
    write_records(&work.join("correlogram.csv"), &h, &correlogram)?;

    let rows: Vec<(&str, crate::evaluation::ConfusionSummary)> = metrics
        .iter()
        .map(|m| (m.model.as_str(), crate::evaluation::ConfusionSummary::from_counts(m.a, m.b, m.c, m.d)))
        .collect();
    let mut report = render_confusion_table(&rows);
    report.push('\n');
    for m in &metrics {
        report.push_str(&format!(
            "{}: SKSS {:.3} (per patch {:.4}), LSD {:.3} dB\n",
            m.model, m.skss, m.skss_patch_mean, m.lsd
        ));
    }
    report.push_str(&format!(
        "Daily totals inside the 95% range: {covered} of {} days ({coverage:.1}%)\n",
        days.len()
    ));
    write_text(&work.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

// ---------------------------------------------------------------------------
// diagnose

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AcfRow {
    model: String,
    parameter: String,
    chain: usize,
    lag: usize,
    acf: f64,
    band: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceRow {
    model: String,
    chain: usize,
    iteration: usize,
    parameter: String,
    value: f64,
}

fn cmd_diagnose(work: &Path, cfg: &RunConfig, max_lag: usize, thin: usize) -> Result<(), CliError> {
    let grid = read_grid(&need(work.join("buildings.csv"))?)?;
    let mut files = vec![("counts".to_string(), work.join("count_posterior.csv"))];
    files.extend(VALUE_PARTS.iter().map(|p| (p.to_string(), work.join(format!("value_{p}.csv")))));
    let mut acf_rows = Vec::new();
    let mut trace_rows = Vec::new();
    let mut summary = Vec::new();
    let mut found = 0;
    for (model, path) in files {
        if !path.exists() {
            continue;
        }
        found += 1;
        let s = read_posterior(&path)?;
        summary.extend(summarize(&model, &s));
        for c in 0..s.n_chains() {
            let band = clt_band(s.n_draws());
            for (i, name) in s.names.iter().enumerate() {
                let col = s.chain_column(c, i);
                // constant chains have no autocorrelation; they show up in the summary instead
                if let Ok(acf) = autocorrelation(&col, max_lag) {
                    for (lag, a) in acf.into_iter().enumerate() {
                        acf_rows.push(AcfRow {
                            model: model.clone(),
                            parameter: name.clone(),
                            chain: c,
                            lag,
                            acf: a,
                            band,
                        });
                    }
                }
                for (it, v) in col.iter().enumerate().step_by(thin) {
                    trace_rows.push(TraceRow {
                        model: model.clone(),
                        chain: c,
                        iteration: it,
                        parameter: name.clone(),
                        value: *v,
                    });
                }
            }
        }
    }
    if found == 0 {
        return Err(CliError::Io(format!("{}: no posterior files to diagnose", work.display())));
    }
    let h = header(cfg.seed, &grid);
    write_records(&work.join("diagnostics_acf.csv"), &h, &acf_rows)?;
    write_records(&work.join("diagnostics_trace.csv"), &h, &trace_rows)?;
    write_records(&work.join("diagnostics_summary.csv"), &h, &summary)?;
    Ok(())
}
