//! Prediction assembly from count and value draws, and the evaluation
//! metrics: SKSS, LSD, confusion rates, extremal and Spearman correlation.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PlanarPoint;
use crate::samplers::quantile_sorted;

pub const SKSS_PATCH: usize = 10;

/// Spectral power below this fraction of a map's peak power is floored.
pub const LSD_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum EvaluationError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("building {0} is not in any cell")]
    Membership(usize),
}

// ---------------------------------------------------------------------------
// prediction assembly

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Summary {
    /// Mean and 2.5/97.5 percentiles; sorts `samples` in place.
    pub fn from_samples(samples: &mut [f64]) -> Self {
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        samples.sort_by(f64::total_cmp);
        Self {
            mean,
            lower: quantile_sorted(samples, 0.025),
            upper: quantile_sorted(samples, 0.975),
        }
    }

    pub fn covers(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Damage prediction for one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamagePrediction {
    pub buildings: Vec<Summary>,
    pub cells: Vec<Summary>,
    pub total: Summary,
    /// Composite samples in which some cell asked for more claims than it
    /// has buildings.
    pub clamped: usize,
}

/// Combines `n` count draws (claims per cell) with `m` value draws (one
/// claim value per building). For every pair the buildings of each cell are
/// taken in order of decreasing insured value and the first `N` are marked
/// damaged. `cells[c]` lists the buildings of cell `c`; `insured` is indexed
/// by building.
pub fn combine_predictions(
    count_draws: &[Vec<u64>],
    value_draws: &[Vec<f64>],
    insured: &[f64],
    cells: &[Vec<usize>],
) -> Result<DamagePrediction, EvaluationError> {
    if count_draws.is_empty() || value_draws.is_empty() {
        return Err(EvaluationError::Empty("count or value draws"));
    }
    let n_build = insured.len();
    if let Some(d) = count_draws.iter().find(|d| d.len() != cells.len()) {
        return Err(EvaluationError::Shape(format!("count draw has {} cells, expected {}", d.len(), cells.len())));
    }
    if let Some(v) = value_draws.iter().find(|v| v.len() != n_build) {
        return Err(EvaluationError::Shape(format!("value draw has {} buildings, expected {n_build}", v.len())));
    }
    let mut seen = vec![false; n_build];
    let mut ordered = Vec::with_capacity(cells.len());
    for members in cells {
        let mut m = members.clone();
        for &b in &m {
            if b >= n_build {
                return Err(EvaluationError::Membership(b));
            }
            seen[b] = true;
        }
        m.sort_by(|&a, &b| insured[b].total_cmp(&insured[a]).then(a.cmp(&b)));
        ordered.push(m);
    }
    if let Some(b) = seen.iter().position(|s| !s) {
        return Err(EvaluationError::Membership(b));
    }

    let total_pairs = count_draws.len() * value_draws.len();
    let mut per_building = vec![Vec::with_capacity(total_pairs); n_build];
    let mut per_cell = vec![Vec::with_capacity(total_pairs); cells.len()];
    let mut totals = Vec::with_capacity(total_pairs);
    let mut clamped = 0;
    for counts in count_draws {
        let over = counts.iter().zip(&ordered).any(|(&k, m)| k as usize > m.len());
        for values in value_draws {
            let mut total = 0.0;
            for (c, m) in ordered.iter().enumerate() {
                let k = (counts[c] as usize).min(m.len());
                let mut cell_sum = 0.0;
                for (rank, &b) in m.iter().enumerate() {
                    let v = if rank < k { values[b] } else { 0.0 };
                    cell_sum += v;
                    per_building[b].push(v);
                }
                total += cell_sum;
                per_cell[c].push(cell_sum);
            }
            totals.push(total);
            clamped += over as usize;
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} of {total_pairs} composite samples clamped to cell building counts");
    }
    Ok(DamagePrediction {
        buildings: per_building.iter_mut().map(|s| Summary::from_samples(s)).collect(),
        cells: per_cell.iter_mut().map(|s| Summary::from_samples(s)).collect(),
        total: Summary::from_samples(&mut totals),
        clamped,
    })
}

// ---------------------------------------------------------------------------
// SKSS

fn check_shapes(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> Result<(), EvaluationError> {
    if a.len() != b.len() {
        return Err(EvaluationError::Shape(format!("{} target maps vs {} predicted", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(EvaluationError::Empty("maps"));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(EvaluationError::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
    }
    Ok(())
}

/// Two-sample Kolmogorov-Smirnov distance between empirical CDFs.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

fn patch_ranges(len: usize, patch: usize) -> Vec<std::ops::Range<usize>> {
    (0..len).step_by(patch).map(|s| s..(s + patch).min(len)).collect()
}

/// KS distance of every (day, patch) pair, in day-major order. Maps whose
/// sides are not multiples of `patch` get smaller trailing patches.
pub fn skss_terms(target: &[DMatrix<f64>], predicted: &[DMatrix<f64>], patch: usize) -> Result<Vec<f64>, EvaluationError> {
    check_shapes(target, predicted)?;
    let patch = patch.max(1);
    let mut out = Vec::new();
    for (t, p) in target.iter().zip(predicted) {
        for rows in patch_ranges(t.nrows(), patch) {
            for cols in patch_ranges(t.ncols(), patch) {
                let collect = |m: &DMatrix<f64>| -> Vec<f64> {
                    rows.clone().flat_map(|r| cols.clone().map(move |c| m[(r, c)])).collect()
                };
                out.push(ks_distance(&collect(t), &collect(p)));
            }
        }
    }
    Ok(out)
}

/// Spatially convolved KS statistic: the sum over days and patches.
pub fn skss(target: &[DMatrix<f64>], predicted: &[DMatrix<f64>], patch: usize) -> Result<f64, EvaluationError> {
    Ok(skss_terms(target, predicted, patch)?.iter().sum())
}

// ---------------------------------------------------------------------------
// LSD

fn power_spectrum(planner: &mut FftPlanner<f64>, m: &DMatrix<f64>) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut buf: Vec<Complex<f64>> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| Complex::new(m[(r, c)], 0.0))
        .collect();
    let row_fft = planner.plan_fft_forward(cols);
    for row in buf.chunks_mut(cols) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(rows);
    let mut col = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = buf[r * cols + c];
        }
        col_fft.process(&mut col);
        for r in 0..rows {
            buf[r * cols + c] = col[r];
        }
    }
    let power: Vec<f64> = buf.iter().map(|z| z.norm_sqr()).collect();
    let floor = LSD_FLOOR * power.iter().cloned().fold(0.0, f64::max);
    // an all-zero map keeps a positive floor so the log stays finite
    let floor = if floor > 0.0 { floor } else { f64::MIN_POSITIVE };
    power.into_iter().map(|p| p.max(floor)).collect()
}

/// Log-spectral distance in decibels between target and predicted maps,
/// root mean square over days and all 2-D DFT coefficients.
pub fn lsd(target: &[DMatrix<f64>], predicted: &[DMatrix<f64>]) -> Result<f64, EvaluationError> {
    check_shapes(target, predicted)?;
    let mut planner = FftPlanner::new();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, p) in target.iter().zip(predicted) {
        let pt = power_spectrum(&mut planner, t);
        let pp = power_spectrum(&mut planner, p);
        for (a, b) in pt.iter().zip(&pp) {
            sum += (10.0 * (a / b).log10()).powi(2);
        }
        n += pt.len();
    }
    Ok((sum / n as f64).sqrt())
}

// ---------------------------------------------------------------------------
// confusion table

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSummary {
    /// True positives, false positives, false negatives and true negatives,
    /// each averaged over days.
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    /// Percentages; `None` when the denominator is zero.
    pub far: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
}

fn pct(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| 100.0 * num / den)
}

impl ConfusionSummary {
    pub fn from_counts(a: f64, b: f64, c: f64, d: f64) -> Self {
        let far = pct(b, b + d);
        Self {
            a,
            b,
            c,
            d,
            far,
            sensitivity: pct(a, a + c),
            // complement of the false-alarm rate, so the two sum to 100
            specificity: far.map(|f| 100.0 - f),
            ppv: pct(a, a + b),
        }
    }

    /// One Markdown table row: `| name | FAR | Sens | Spec | PPV |`.
    pub fn table_row(&self, name: &str) -> String {
        let fmt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"));
        format!(
            "| {name} | {} | {} | {} | {} |",
            fmt(self.far),
            fmt(self.sensitivity),
            fmt(self.specificity),
            fmt(self.ppv)
        )
    }
}

pub const TABLE_HEADER: &str = "| Model | FAR | Sensitivity | Specificity | PPV |\n|---|---|---|---|---|";

/// Text report with one row per model.
pub fn render_confusion_table(rows: &[(&str, ConfusionSummary)]) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for (name, c) in rows {
        let _ = writeln!(s, "{}", c.table_row(name));
    }
    s
}

/// Confusion counts per day (positive = any damage in the cell), averaged
/// over days.
pub fn confusion_metrics(predicted: &[Vec<bool>], observed: &[Vec<bool>]) -> Result<ConfusionSummary, EvaluationError> {
    if predicted.len() != observed.len() {
        return Err(EvaluationError::Shape(format!("{} predicted days vs {} observed", predicted.len(), observed.len())));
    }
    if predicted.is_empty() {
        return Err(EvaluationError::Empty("days"));
    }
    let mut acc = [0usize; 4];
    for (p, o) in predicted.iter().zip(observed) {
        if p.len() != o.len() {
            return Err(EvaluationError::Shape(format!("{} predicted cells vs {} observed", p.len(), o.len())));
        }
        for (&p, &o) in p.iter().zip(o) {
            let k = match (p, o) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            acc[k] += 1;
        }
    }
    let t = predicted.len() as f64;
    let [a, b, c, d] = acc.map(|x| x as f64 / t);
    Ok(ConfusionSummary::from_counts(a, b, c, d))
}

// ---------------------------------------------------------------------------
// correlation

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` if either series is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelogramBin {
    pub lo: f64,
    pub hi: f64,
    pub n_pairs: usize,
    /// Bin means and 5%/95% envelopes across pairs; `None` for empty bins.
    pub rho: Option<Summary>,
    pub pi: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialCorrelogram {
    pub bins: Vec<CorrelogramBin>,
}

fn envelope(v: &mut [f64]) -> Option<Summary> {
    if v.is_empty() {
        return None;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.sort_by(f64::total_cmp);
    Some(Summary { mean, lower: quantile_sorted(v, 0.05), upper: quantile_sorted(v, 0.95) })
}

/// Empirical extremal correlation `P(X_s' >= u | X_s >= u)` and Spearman
/// correlation for every pair of cells, binned by distance. `edges` are the
/// bin boundaries (half-open bins, the last one closed). Both conditioning
/// directions of a pair enter the extremal estimate when defined.
pub fn extremal_correlation(
    series: &[Vec<f64>],
    positions: &[PlanarPoint],
    u: f64,
    edges: &[f64],
) -> Result<SpatialCorrelogram, EvaluationError> {
    if series.len() < 2 {
        return Err(EvaluationError::Empty("need at least two cells"));
    }
    if positions.len() != series.len() {
        return Err(EvaluationError::Shape(format!("{} positions for {} series", positions.len(), series.len())));
    }
    if edges.len() < 2 {
        return Err(EvaluationError::Empty("need at least one distance bin"));
    }
    let t = series[0].len();
    if series.iter().any(|s| s.len() != t) {
        return Err(EvaluationError::Shape("series lengths differ".into()));
    }
    let nb = edges.len() - 1;
    let mut pairs = vec![0usize; nb];
    let mut rhos = vec![Vec::new(); nb];
    let mut pis = vec![Vec::new(); nb];
    let exceed: Vec<Vec<bool>> = series.iter().map(|s| s.iter().map(|&x| x >= u).collect()).collect();
    for i in 0..series.len() {
        for j in i + 1..series.len() {
            let h = positions[i].distance(&positions[j]);
            let Some(k) = (0..nb).find(|&k| h >= edges[k] && (h < edges[k + 1] || (k == nb - 1 && h == edges[nb]))) else {
                continue;
            };
            pairs[k] += 1;
            if let Some(r) = spearman(&series[i], &series[j]) {
                rhos[k].push(r);
            }
            let joint = exceed[i].iter().zip(&exceed[j]).filter(|(a, b)| **a && **b).count() as f64;
            for s in [i, j] {
                let n = exceed[s].iter().filter(|e| **e).count();
                if n > 0 {
                    pis[k].push(joint / n as f64);
                }
            }
        }
    }
    Ok(SpatialCorrelogram {
        bins: (0..nb)
            .map(|k| CorrelogramBin {
                lo: edges[k],
                hi: edges[k + 1],
                n_pairs: pairs[k],
                rho: envelope(&mut rhos[k]),
                pi: envelope(&mut pis[k]),
            })
            .collect(),
    })
}

/// QQ plot coordinates: `(theoretical, empirical)` with plotting positions
/// `(i - 0.5) / n`.
pub fn qq_points(sample: &[f64], quantile: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter().enumerate().map(|(i, &x)| (quantile((i as f64 + 0.5) / n), x)).collect()
}
