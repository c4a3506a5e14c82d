//! CSV ingestion and persistence, the 2 km grid, and pre-processing:
//! claim-date clustering, the April–September season filter and the
//! year-based train/validation/test split.
//!
//! Every file may start with `# key=value` comment lines; the master seed of
//! the run that produced a file is recorded there.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_lonlat, unproject, PlanarPoint};
use crate::samplers::{ChainDraws, PosteriorSamples};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}, line {line}: column `{column}`: {msg}")]
    Schema {
        path: PathBuf,
        line: u64,
        column: String,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("covariate grid is missing {} cell-days, first {:?}", .0.len(), .0.first())]
    MissingCells(Vec<(NaiveDate, usize, usize)>),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// grid

/// Regular grid of square cells centred on `(center_lon, center_lat)`,
/// which is also the origin of the planar coordinates. Cell `(cx, cy)` has
/// index `cy * nx + cx`; `cx` grows eastwards and `cy` northwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub center_lon: f64,
    pub center_lat: f64,
    pub cell_km: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, cx: usize, cy: usize) -> usize {
        cy * self.nx + cx
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.nx, index / self.nx)
    }

    fn south_west(&self) -> PlanarPoint {
        PlanarPoint::new(
            -0.5 * self.nx as f64 * self.cell_km,
            -0.5 * self.ny as f64 * self.cell_km,
        )
    }

    pub fn centroid(&self, index: usize) -> PlanarPoint {
        let (cx, cy) = self.coords(index);
        let sw = self.south_west();
        PlanarPoint::new(
            sw.x + (cx as f64 + 0.5) * self.cell_km,
            sw.y + (cy as f64 + 0.5) * self.cell_km,
        )
    }

    pub fn centroids(&self) -> Vec<PlanarPoint> {
        (0..self.n_cells()).map(|i| self.centroid(i)).collect()
    }

    pub fn centroid_lonlat(&self, index: usize) -> (f64, f64) {
        unproject(self.centroid(index), self.center_lon, self.center_lat)
    }

    /// Vertical extent of the grid in planar km, `(south, north)`.
    pub fn y_extent(&self) -> (f64, f64) {
        let h = 0.5 * self.ny as f64 * self.cell_km;
        (-h, h)
    }

    /// Cell containing `p`; points on a shared edge belong to the cell to
    /// the south-west of it.
    pub fn locate(&self, p: PlanarPoint) -> Option<usize> {
        let sw = self.south_west();
        let bin = |v: f64, n: usize| -> Option<usize> {
            let t = v / self.cell_km;
            if !(t >= 0.0) || t > n as f64 {
                return None;
            }
            Some(((t.ceil() as i64 - 1).max(0)) as usize)
        };
        let cx = bin(p.x - sw.x, self.nx)?;
        let cy = bin(p.y - sw.y, self.ny)?;
        Some(self.index(cx, cy))
    }

    pub fn locate_lonlat(&self, lon: f64, lat: f64) -> Option<usize> {
        let p = project_lonlat(lon, lat, self.center_lon, self.center_lat).ok()?;
        self.locate(p)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.nx == 0 || self.ny == 0 || !(self.cell_km > 0.0) {
            return Err(DataError::Invalid("grid needs positive size and cell width".into()));
        }
        if !(self.center_lat.abs() < 89.0) {
            return Err(DataError::Invalid("grid centre too close to a pole".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingRecord {
    pub building_id: u64,
    pub lon: f64,
    pub lat: f64,
    /// m^3
    pub volume: f64,
    /// CHF
    pub insured_value: f64,
    pub construction_year: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub claim_id: u64,
    pub building_id: u64,
    pub date: NaiveDate,
    /// CHF
    pub value: f64,
}

/// One row of the long-format covariate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRow {
    pub date: NaiveDate,
    pub cell_x: usize,
    pub cell_y: usize,
    pub poh: f64,
    pub meshs: f64,
    pub exposure: f64,
    pub climada_count: f64,
    pub climada_value: f64,
    pub wind_dir: f64,
}

/// Covariates of every cell on one day, indexed by cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateDay {
    pub date: NaiveDate,
    pub poh: Vec<f64>,
    pub meshs: Vec<f64>,
    pub exposure: Vec<f64>,
    pub climada_count: Vec<f64>,
    pub climada_value: Vec<f64>,
    pub wind_dir: Vec<f64>,
}

impl CovariateDay {
    pub fn zeros(date: NaiveDate, n_cells: usize) -> Self {
        Self {
            date,
            poh: vec![0.0; n_cells],
            meshs: vec![0.0; n_cells],
            exposure: vec![0.0; n_cells],
            climada_count: vec![0.0; n_cells],
            climada_value: vec![0.0; n_cells],
            wind_dir: vec![0.0; n_cells],
        }
    }

    /// Any hail signal at all: a CLIMADA count or a positive POH somewhere.
    pub fn is_active(&self) -> bool {
        self.climada_count.iter().any(|&m| m > 0.0) || self.poh.iter().any(|&p| p > 0.0)
    }

    /// Circular mean of the per-cell wind directions, degrees in [0, 360).
    pub fn mean_wind_dir(&self) -> f64 {
        let (s, c) = self.wind_dir.iter().fold((0.0, 0.0), |(s, c), d| {
            let r = d.to_radians();
            (s + r.sin(), c + r.cos())
        });
        s.atan2(c).to_degrees().rem_euclid(360.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateGrid {
    pub nx: usize,
    pub ny: usize,
    /// Sorted by date, one entry per date.
    pub days: Vec<CovariateDay>,
}

impl CovariateGrid {
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        self.days.binary_search_by_key(&date, |d| d.date).ok()
    }

    pub fn day(&self, date: NaiveDate) -> Option<&CovariateDay> {
        self.day_index(date).map(|i| &self.days[i])
    }

    pub fn date_span(&self) -> Option<(NaiveDate, NaiveDate)> {
        Some((self.days.first()?.date, self.days.last()?.date))
    }

    /// Assembles rows into per-day vectors, rejecting duplicated or missing
    /// cell-days.
    pub fn from_rows(nx: usize, ny: usize, rows: &[CovariateRow]) -> Result<Self, DataError> {
        let n = nx * ny;
        let mut by_date: BTreeMap<NaiveDate, (CovariateDay, Vec<bool>)> = BTreeMap::new();
        for r in rows {
            if r.cell_x >= nx || r.cell_y >= ny {
                return Err(DataError::Invalid(format!(
                    "cell ({}, {}) on {} lies outside the {nx}x{ny} grid",
                    r.cell_x, r.cell_y, r.date
                )));
            }
            let (day, seen) = by_date
                .entry(r.date)
                .or_insert_with(|| (CovariateDay::zeros(r.date, n), vec![false; n]));
            let i = r.cell_y * nx + r.cell_x;
            if seen[i] {
                return Err(DataError::Invalid(format!(
                    "duplicate row for cell ({}, {}) on {}",
                    r.cell_x, r.cell_y, r.date
                )));
            }
            seen[i] = true;
            day.poh[i] = r.poh;
            day.meshs[i] = r.meshs;
            day.exposure[i] = r.exposure;
            day.climada_count[i] = r.climada_count;
            day.climada_value[i] = r.climada_value;
            day.wind_dir[i] = r.wind_dir;
        }
        let mut missing = Vec::new();
        let mut days = Vec::with_capacity(by_date.len());
        for (date, (day, seen)) in by_date {
            for (i, s) in seen.iter().enumerate() {
                if !s {
                    missing.push((date, i % nx, i / nx));
                }
            }
            days.push(day);
        }
        if !missing.is_empty() {
            return Err(DataError::MissingCells(missing));
        }
        Ok(Self { nx, ny, days })
    }

    pub fn to_rows(&self) -> Vec<CovariateRow> {
        let mut rows = Vec::with_capacity(self.days.len() * self.n_cells());
        for d in &self.days {
            for i in 0..self.n_cells() {
                rows.push(CovariateRow {
                    date: d.date,
                    cell_x: i % self.nx,
                    cell_y: i / self.nx,
                    poh: d.poh[i],
                    meshs: d.meshs[i],
                    exposure: d.exposure[i],
                    climada_count: d.climada_count[i],
                    climada_value: d.climada_value[i],
                    wind_dir: d.wind_dir[i],
                });
            }
        }
        rows
    }
}

/// Records that can be checked after parsing; the message names the column.
pub trait Validate {
    fn validate(&self) -> Result<(), (&'static str, String)>;
}

fn finite(column: &'static str, v: f64) -> Result<(), (&'static str, String)> {
    if v.is_finite() {
        Ok(())
    } else {
        Err((column, format!("value {v} is not finite")))
    }
}

impl Validate for BuildingRecord {
    fn validate(&self) -> Result<(), (&'static str, String)> {
        finite("lon", self.lon)?;
        finite("lat", self.lat)?;
        finite("volume", self.volume)?;
        if !(self.insured_value > 0.0) || !self.insured_value.is_finite() {
            return Err(("insured_value", format!("must be positive, got {}", self.insured_value)));
        }
        Ok(())
    }
}

impl Validate for ClaimRecord {
    fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.value > 0.0) || !self.value.is_finite() {
            return Err(("value", format!("must be positive, got {}", self.value)));
        }
        Ok(())
    }
}

impl Validate for CovariateRow {
    fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(0.0..=1.0).contains(&self.poh) {
            return Err(("poh", format!("must lie in [0, 1], got {}", self.poh)));
        }
        if !(self.meshs >= 0.0) || !self.meshs.is_finite() {
            return Err(("meshs", format!("must be non-negative, got {}", self.meshs)));
        }
        for (c, v) in [
            ("exposure", self.exposure),
            ("climada_count", self.climada_count),
            ("climada_value", self.climada_value),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err((c, format!("must be non-negative, got {v}")));
            }
        }
        finite("wind_dir", self.wind_dir)
    }
}

// ---------------------------------------------------------------------------
// generic CSV plumbing

/// `# key=value` metadata written at the top of every output file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header(pub Vec<(String, String)>);

impl Header {
    pub fn with_seed(seed: u64) -> Self {
        Self(vec![("seed".into(), seed.to_string())])
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn seed(&self) -> Option<u64> {
        self.get("seed")?.parse().ok()
    }
}

pub fn read_header(path: &Path) -> Result<Header, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        let Some(rest) = line.strip_prefix('#') else {
            break;
        };
        if let Some((k, v)) = rest.trim().split_once('=') {
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    Ok(Header(out))
}

pub fn write_records<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let mut file = File::create(path).map_err(io_err(path))?;
    for (k, v) in &header.0 {
        writeln!(file, "# {k}={v}").map_err(io_err(path))?;
    }
    let mut w = csv::Writer::from_writer(file);
    for r in records {
        w.serialize(r).map_err(|e| DataError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a CSV file of `T`, skipping comment lines. Parse failures report
/// the file line and the offending column.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    read_records_with(path, |_: &T| Ok(()))
}

pub fn read_validated<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>, DataError> {
    read_records_with(path, T::validate)
}

fn read_records_with<T: DeserializeOwned>(
    path: &Path,
    check: impl Fn(&T) -> Result<(), (&'static str, String)>,
) -> Result<Vec<T>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file);
    let format_err = |msg: String| DataError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let headers = rdr.headers().map_err(|e| format_err(e.to_string()))?.clone();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| format_err(e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let value: T = record.deserialize(Some(&headers)).map_err(|e| {
            let column = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err
                    .field()
                    .and_then(|f| headers.get(f as usize))
                    .map(str::to_string)
                    .unwrap_or_else(|| missing_field(&err.to_string())),
                _ => String::new(),
            };
            DataError::Schema {
                path: path.to_path_buf(),
                line,
                column,
                msg: e.to_string(),
            }
        })?;
        check(&value).map_err(|(column, msg)| DataError::Schema {
            path: path.to_path_buf(),
            line,
            column: column.to_string(),
            msg,
        })?;
        out.push(value);
    }
    Ok(out)
}

fn missing_field(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("").to_string()
}

pub fn write_buildings(path: &Path, header: &Header, b: &[BuildingRecord]) -> Result<(), DataError> {
    write_records(path, header, b)
}

pub fn read_buildings(path: &Path) -> Result<Vec<BuildingRecord>, DataError> {
    read_validated(path)
}

pub fn write_claims(path: &Path, header: &Header, c: &[ClaimRecord]) -> Result<(), DataError> {
    write_records(path, header, c)
}

pub fn read_claims(path: &Path) -> Result<Vec<ClaimRecord>, DataError> {
    read_validated(path)
}

pub fn write_covariates(path: &Path, header: &Header, grid: &CovariateGrid) -> Result<(), DataError> {
    let mut header = header.clone();
    header.push("nx", grid.nx);
    header.push("ny", grid.ny);
    write_records(path, &header, &grid.to_rows())
}

/// Grid dimensions come from the `nx`/`ny` header entries when present,
/// otherwise from the largest cell indices.
pub fn read_covariates(path: &Path) -> Result<CovariateGrid, DataError> {
    let rows: Vec<CovariateRow> = read_validated(path)?;
    let header = read_header(path)?;
    let dim = |key: &str, fallback: usize| -> Result<usize, DataError> {
        match header.get(key) {
            Some(v) => v.parse().map_err(|_| DataError::Format {
                path: path.to_path_buf(),
                msg: format!("header entry {key}={v} is not a count"),
            }),
            None => Ok(fallback),
        }
    };
    let nx = dim("nx", rows.iter().map(|r| r.cell_x + 1).max().unwrap_or(0))?;
    let ny = dim("ny", rows.iter().map(|r| r.cell_y + 1).max().unwrap_or(0))?;
    CovariateGrid::from_rows(nx, ny, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DrawRow {
    chain: usize,
    iteration: usize,
    parameter: String,
    value: f64,
}

/// Long-format posterior draws; per-chain sampler statistics go into the
/// header so that reading back reproduces the samples exactly.
pub fn write_posterior(path: &Path, header: &Header, s: &PosteriorSamples) -> Result<(), DataError> {
    let mut header = header.clone();
    if header.get("seed").is_none() {
        header.push("seed", s.seed);
    }
    for (c, ch) in s.chains.iter().enumerate() {
        header.push(
            &format!("chain{c}"),
            format!("{} {} {}", ch.accept_rate, ch.divergences, ch.step_size),
        );
    }
    let mut rows = Vec::with_capacity(s.n_draws() * s.n_params());
    for (c, ch) in s.chains.iter().enumerate() {
        for (it, d) in ch.draws.iter().enumerate() {
            for (name, v) in s.names.iter().zip(d) {
                rows.push(DrawRow {
                    chain: c,
                    iteration: it,
                    parameter: name.clone(),
                    value: *v,
                });
            }
        }
    }
    write_records(path, &header, &rows)
}

pub fn read_posterior(path: &Path) -> Result<PosteriorSamples, DataError> {
    let rows: Vec<DrawRow> = read_records(path)?;
    let header = read_header(path)?;
    let bad = |msg: String| DataError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut names: Vec<String> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for r in &rows {
        if !index.contains_key(&r.parameter) {
            index.insert(r.parameter.clone(), names.len());
            names.push(r.parameter.clone());
        }
    }
    let n_chains = rows.iter().map(|r| r.chain + 1).max().unwrap_or(0);
    let mut chains: Vec<ChainDraws> = (0..n_chains)
        .map(|c| {
            let stats: Vec<f64> = header
                .get(&format!("chain{c}"))
                .map(|s| s.split_whitespace().filter_map(|v| v.parse().ok()).collect())
                .unwrap_or_default();
            ChainDraws {
                draws: Vec::new(),
                accept_rate: stats.first().copied().unwrap_or(0.0),
                divergences: stats.get(1).map(|v| *v as usize).unwrap_or(0),
                step_size: stats.get(2).copied().unwrap_or(0.0),
            }
        })
        .collect();
    for r in &rows {
        let draws = &mut chains[r.chain].draws;
        if r.iteration == draws.len() {
            draws.push(vec![f64::NAN; names.len()]);
        } else if r.iteration + 1 != draws.len() {
            return Err(bad(format!(
                "chain {} iteration {} out of order",
                r.chain, r.iteration
            )));
        }
        draws[r.iteration][index[&r.parameter]] = r.value;
    }
    if chains.iter().flat_map(|c| &c.draws).flatten().any(|v| v.is_nan()) {
        return Err(bad("some draws lack a value for every parameter".into()));
    }
    Ok(PosteriorSamples {
        names,
        chains,
        seed: header.seed().unwrap_or(0),
    })
}

// ---------------------------------------------------------------------------
// pre-processing

pub fn is_in_season(date: NaiveDate) -> bool {
    (4..=9).contains(&date.month())
}

pub fn is_hail_season(date: NaiveDate) -> bool {
    (5..=8).contains(&date.month())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeasonFiltered {
    pub claims: Vec<ClaimRecord>,
    /// Parallel to `claims`: May–August.
    pub hail_season: Vec<bool>,
    pub dropped: usize,
}

/// Keeps April–September claims and tags those in the May–August hail season.
pub fn season_filter(claims: &[ClaimRecord]) -> SeasonFiltered {
    let kept: Vec<ClaimRecord> = claims.iter().filter(|c| is_in_season(c.date)).cloned().collect();
    SeasonFiltered {
        dropped: claims.len() - kept.len(),
        hail_season: kept.iter().map(|c| is_hail_season(c.date)).collect(),
        claims: kept,
    }
}

pub trait Dated {
    fn date(&self) -> NaiveDate;
}

impl Dated for ClaimRecord {
    fn date(&self) -> NaiveDate {
        self.date
    }
}

impl Dated for CovariateDay {
    fn date(&self) -> NaiveDate {
        self.date
    }
}

impl Dated for NaiveDate {
    fn date(&self) -> NaiveDate {
        *self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitYears {
    /// Last training year.
    pub train_end: i32,
    /// Last validation year; later years are the test set.
    pub validation_end: i32,
}

impl Default for SplitYears {
    fn default() -> Self {
        Self {
            train_end: 2015,
            validation_end: 2017,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Validation,
    Test,
}

impl SplitYears {
    pub fn subset(&self, date: NaiveDate) -> Subset {
        let y = date.year();
        if y <= self.train_end {
            Subset::Train
        } else if y <= self.validation_end {
            Subset::Validation
        } else {
            Subset::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Order-preserving partition by calendar year.
pub fn split_by_year<T: Dated + Clone>(records: &[T], years: SplitYears) -> Split<T> {
    let mut out = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for r in records {
        match years.subset(r.date()) {
            Subset::Train => out.train.push(r.clone()),
            Subset::Validation => out.validation.push(r.clone()),
            Subset::Test => out.test.push(r.clone()),
        }
    }
    out
}

/// Cell of every building, `None` when it falls outside the grid.
pub fn assign_cells(buildings: &[BuildingRecord], grid: &GridSpec) -> Vec<Option<usize>> {
    buildings.iter().map(|b| grid.locate_lonlat(b.lon, b.lat)).collect()
}

/// Moves a date to the highest-POH day within two days either side,
/// repeating until the date is a local maximum. `poh` returns `None` for a
/// day with no usable value; any such day in a window stops the scan and
/// the function returns `None`.
pub fn cluster_date(date: NaiveDate, poh: impl Fn(NaiveDate) -> Option<f64>) -> Option<NaiveDate> {
    let mut current = date;
    loop {
        let here = poh(current)?;
        let mut best = (current, here);
        // offsets ordered by distance so ties go to the nearest day
        for off in [-1i64, 1, -2, 2] {
            let d = current + Duration::days(off);
            let v = poh(d)?;
            if v > best.1 {
                best = (d, v);
            }
        }
        // any strict improvement exceeds half the claim-day POH as well
        if best.0 == current || !(best.1 > 0.5 * here) {
            return Some(current);
        }
        current = best.0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub claims: Vec<ClaimRecord>,
    pub moved: usize,
    /// Claims whose POH window could not be read; passed through unchanged.
    pub flagged: Vec<u64>,
}

/// Re-dates every claim with [`cluster_date`] using the POH of the claim's
/// cell. Dates inside the covariate span but absent from the file count as
/// POH 0 (files list only days with data); claims outside the span or whose
/// building is unknown or off-grid are flagged.
pub fn cluster_claim_dates(
    claims: &[ClaimRecord],
    buildings: &[BuildingRecord],
    grid: &GridSpec,
    covariates: &CovariateGrid,
) -> ClusterOutcome {
    let cells: BTreeMap<u64, Option<usize>> = buildings
        .iter()
        .map(|b| (b.building_id, grid.locate_lonlat(b.lon, b.lat)))
        .collect();
    let span = covariates.date_span();
    let mut out = ClusterOutcome {
        claims: Vec::with_capacity(claims.len()),
        moved: 0,
        flagged: Vec::new(),
    };
    for c in claims {
        let cell = cells.get(&c.building_id).copied().flatten();
        let new_date = match (cell, span) {
            (Some(cell), Some((first, last))) if cell < covariates.n_cells() => cluster_date(c.date, |d| {
                if d < first || d > last {
                    None
                } else {
                    Some(covariates.day(d).map_or(0.0, |day| day.poh[cell]))
                }
            }),
            _ => None,
        };
        let mut claim = c.clone();
        match new_date {
            Some(d) => {
                if d != c.date {
                    out.moved += 1;
                }
                claim.date = d;
            }
            None => out.flagged.push(c.claim_id),
        }
        out.claims.push(claim);
    }
    out
}

/// Per-day, per-cell number of claims on the covariate days.
pub fn count_claims(
    claims: &[ClaimRecord],
    building_cells: &BTreeMap<u64, usize>,
    covariates: &CovariateGrid,
) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; covariates.n_cells()]; covariates.days.len()];
    for c in claims {
        if let (Some(t), Some(&cell)) = (covariates.day_index(c.date), building_cells.get(&c.building_id)) {
            counts[t][cell] += 1;
        }
    }
    counts
}

/// Downscaled CLIMADA value of one building: the cell's predicted damage
/// shared in proportion to insured value.
pub fn downscale_climada_value(cell_value: f64, cell_exposure: f64, insured_value: f64) -> f64 {
    if cell_exposure > 0.0 {
        cell_value * insured_value / cell_exposure
    } else {
        0.0
    }
}
