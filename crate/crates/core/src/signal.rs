//! Frequency-domain representation of raw time series.
//!
//! Each series is turned into a one-sided periodogram, interpolated onto a
//! frequency grid shared by the whole dataset, then log-scaled and
//! z-normalized so that cells of different lengths become comparable
//! fixed-length coefficient vectors.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A uniformly sampled real signal.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    values: Vec<f64>,
    sample_interval: f64,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, sample_interval: f64) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "time series needs at least 2 samples, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at position {pos}")));
        }
        if !(sample_interval.is_finite() && sample_interval > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sample interval must be positive, got {sample_interval}"
            )));
        }
        Ok(Self {
            values,
            sample_interval,
        })
    }

    pub fn with_unit_interval(values: Vec<f64>) -> Result<Self> {
        Self::new(values, 1.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample_interval(&self) -> f64 {
        self.sample_interval
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Spacing between consecutive periodogram frequencies.
    pub fn frequency_gap(&self) -> f64 {
        1.0 / (self.values.len() as f64 * self.sample_interval)
    }
}

/// An `n x p` grid of series, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    series: Vec<TimeSeries>,
}

impl TimeSeriesDataset {
    pub fn new(row_ids: Vec<String>, col_ids: Vec<String>, series: Vec<TimeSeries>) -> Result<Self> {
        if row_ids.is_empty() || col_ids.is_empty() {
            return Err(Error::InvalidInput("dataset needs at least one row and one column".into()));
        }
        if series.len() != row_ids.len() * col_ids.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} x {} = {} series, got {}",
                row_ids.len(),
                col_ids.len(),
                row_ids.len() * col_ids.len(),
                series.len()
            )));
        }
        Ok(Self {
            row_ids,
            col_ids,
            series,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn get(&self, i: usize, j: usize) -> &TimeSeries {
        &self.series[i * self.col_ids.len() + j]
    }

    /// All cells in row-major order.
    pub fn series(&self) -> &[TimeSeries] {
        &self.series
    }
}

/// One-sided power spectrum of a series.
#[derive(Clone, Debug, PartialEq)]
pub struct Periodogram {
    pub frequencies: Vec<f64>,
    pub powers: Vec<f64>,
}

impl Periodogram {
    /// Total power with interior bins counted twice, which by Parseval equals
    /// the mean squared value of the source series.
    pub fn total_power(&self, series_len: usize) -> f64 {
        let nyquist_bin = series_len % 2 == 0;
        let last = self.powers.len() - 1;
        self.powers
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                if k == 0 || (nyquist_bin && k == last) {
                    p
                } else {
                    2.0 * p
                }
            })
            .sum()
    }
}

pub fn compute_periodogram(ts: &TimeSeries) -> Periodogram {
    let mut planner = FftPlanner::new();
    periodogram_with(&mut planner, ts)
}

fn periodogram_with(planner: &mut FftPlanner<f64>, ts: &TimeSeries) -> Periodogram {
    let len = ts.len();
    let fft = planner.plan_fft_forward(len);
    let mut buffer: Vec<Complex<f64>> = ts.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buffer);
    let scale = 1.0 / (len as f64 * len as f64);
    let bins = len / 2 + 1;
    let gap = ts.frequency_gap();
    Periodogram {
        frequencies: (0..bins).map(|k| k as f64 * gap).collect(),
        powers: buffer[..bins].iter().map(|c| c.norm_sqr() * scale).collect(),
    }
}

/// Equally spaced frequency axis shared by every cell of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommonFrequencyGrid {
    pub gap: f64,
    pub length: usize,
}

impl CommonFrequencyGrid {
    pub fn new(gap: f64, length: usize) -> Result<Self> {
        if !(gap.is_finite() && gap > 0.0) {
            return Err(Error::InvalidInput(format!("grid gap must be positive, got {gap}")));
        }
        if length < 2 {
            return Err(Error::InvalidInput(format!("grid length must be at least 2, got {length}")));
        }
        Ok(Self { gap, length })
    }

    pub fn frequency(&self, k: usize) -> f64 {
        k as f64 * self.gap
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.length).map(|k| self.frequency(k)).collect()
    }
}

/// Builds the grid from the mean per-series frequency gap.
pub fn common_frequency_grid(dataset: &TimeSeriesDataset, length: usize) -> Result<CommonFrequencyGrid> {
    let gaps: f64 = dataset.series.iter().map(TimeSeries::frequency_gap).sum();
    CommonFrequencyGrid::new(gaps / dataset.series.len() as f64, length)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Linear,
    Cubic,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cubic" => Ok(Self::Cubic),
            other => Err(Error::InvalidInput(format!("unknown interpolation method {other:?}"))),
        }
    }
}

/// Resamples `p` at the grid frequencies.
///
/// Grid points past the last source frequency take the last source power.
/// Results are floored at zero.
pub fn interpolate_periodogram(
    p: &Periodogram,
    grid: &CommonFrequencyGrid,
    method: Interpolation,
) -> Result<Vec<f64>> {
    let xs = &p.frequencies;
    let ys = &p.powers;
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput("periodogram frequencies and powers differ in length".into()));
    }
    let needed = match method {
        Interpolation::Linear => 2,
        Interpolation::Cubic => 4,
    };
    if xs.len() < needed {
        return Err(Error::InvalidInput(format!(
            "{method:?} interpolation needs at least {needed} source points, got {}",
            xs.len()
        )));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("periodogram frequencies must be strictly increasing".into()));
    }
    let x_max = xs[xs.len() - 1];
    let y_last = ys[ys.len() - 1];
    let spline = match method {
        Interpolation::Linear => None,
        Interpolation::Cubic => Some(not_a_knot_second_derivatives(xs, ys)),
    };

    let mut out = Vec::with_capacity(grid.length);
    let mut seg = 0;
    for k in 0..grid.length {
        let x = grid.frequency(k);
        let y = if x >= x_max {
            y_last
        } else if x <= xs[0] {
            ys[0]
        } else {
            while xs[seg + 1] < x {
                seg += 1;
            }
            let (x0, x1) = (xs[seg], xs[seg + 1]);
            let (y0, y1) = (ys[seg], ys[seg + 1]);
            let h = x1 - x0;
            match &spline {
                None => y0 + (y1 - y0) * (x - x0) / h,
                Some(m) => {
                    let a = x1 - x;
                    let b = x - x0;
                    m[seg] * a * a * a / (6.0 * h)
                        + m[seg + 1] * b * b * b / (6.0 * h)
                        + (y0 / h - m[seg] * h / 6.0) * a
                        + (y1 / h - m[seg + 1] * h / 6.0) * b
                }
            }
        };
        out.push(y.max(0.0));
    }
    Ok(out)
}

/// Second derivatives at the knots of the not-a-knot cubic spline.
///
/// The not-a-knot end conditions eliminate the two boundary unknowns, leaving
/// a tridiagonal system in the interior ones. Requires at least 4 knots.
fn not_a_knot_second_derivatives(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let slope: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
    let size = n - 2;
    let mut sub = vec![0.0; size];
    let mut diag = vec![0.0; size];
    let mut sup = vec![0.0; size];
    let mut rhs = vec![0.0; size];
    for r in 0..size {
        let i = r + 1;
        sub[r] = h[i - 1];
        diag[r] = 2.0 * (h[i - 1] + h[i]);
        sup[r] = h[i];
        rhs[r] = 6.0 * (slope[i] - slope[i - 1]);
    }
    // M0 = M1 (1 + h0/h1) - (h0/h1) M2
    let q = h[0] / h[1];
    diag[0] += sub[0] * (1.0 + q);
    sup[0] -= sub[0] * q;
    sub[0] = 0.0;
    // M_{n-1} = M_{n-2} (1 + h_{n-2}/h_{n-3}) - (h_{n-2}/h_{n-3}) M_{n-3}
    let q = h[n - 2] / h[n - 3];
    let last = size - 1;
    diag[last] += sup[last] * (1.0 + q);
    sub[last] -= sup[last] * q;
    sup[last] = 0.0;

    let interior = solve_tridiagonal(&sub, &diag, &sup, &rhs);
    let mut m = vec![0.0; n];
    m[1..n - 1].copy_from_slice(&interior);
    m[0] = m[1] * (1.0 + h[0] / h[1]) - (h[0] / h[1]) * m[2];
    m[n - 1] = m[n - 2] * (1.0 + h[n - 2] / h[n - 3]) - (h[n - 2] / h[n - 3]) * m[n - 3];
    m
}

fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / denom;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// `z(log(x + eps))` with `eps = 1e-12 (1 + max x)` and sample standard deviation.
pub fn log_normalize(interpolated: &[f64]) -> Result<Vec<f64>> {
    let len = interpolated.len();
    if len < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 values to normalize, got {len}")));
    }
    if interpolated.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("powers must be finite and nonnegative".into()));
    }
    let max = interpolated.iter().cloned().fold(0.0, f64::max);
    let eps = 1e-12 * (1.0 + max);
    let logs: Vec<f64> = interpolated.iter().map(|&v| (v + eps).ln()).collect();
    let mean = logs.iter().sum::<f64>() / len as f64;
    let var = logs.iter().map(|&l| (l - mean) * (l - mean)).sum::<f64>() / (len - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::DegenerateSignal("log-periodogram has zero variance".into()));
    }
    Ok(logs.iter().map(|&l| (l - mean) / sd).collect())
}

/// The model input: one coefficient vector per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientGrid {
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    grid: CommonFrequencyGrid,
    /// Cell `(i, j)` occupies `data[(i * p + j) * m ..][..m]`.
    data: Vec<f64>,
    degenerate: Vec<(usize, usize)>,
}

impl CoefficientGrid {
    pub fn new(
        row_ids: Vec<String>,
        col_ids: Vec<String>,
        grid: CommonFrequencyGrid,
        data: Vec<f64>,
        degenerate: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let expected = row_ids.len() * col_ids.len() * grid.length;
        if row_ids.is_empty() || col_ids.is_empty() {
            return Err(Error::InvalidInput("coefficient grid needs at least one row and column".into()));
        }
        if data.len() != expected {
            return Err(Error::InvalidInput(format!(
                "coefficient data has {} values, expected {expected}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("coefficient data contains non-finite values".into()));
        }
        Ok(Self {
            row_ids,
            col_ids,
            grid,
            data,
            degenerate,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_ids.len()
    }

    /// Coefficient vector length `m`.
    pub fn dim(&self) -> usize {
        self.grid.length
    }

    pub fn n_cells(&self) -> usize {
        self.row_ids.len() * self.col_ids.len()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn frequency_grid(&self) -> &CommonFrequencyGrid {
        &self.grid
    }

    pub fn degenerate_cells(&self) -> &[(usize, usize)] {
        &self.degenerate
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let m = self.dim();
        let start = (i * self.n_cols() + j) * m;
        &self.data[start..start + m]
    }

    /// Flat storage, cell-major with cell index `i * p + j`.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sub-grid made of the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> CoefficientGrid {
        let m = self.dim();
        let mut data = Vec::with_capacity(self.n_rows() * cols.len() * m);
        for i in 0..self.n_rows() {
            for &j in cols {
                data.extend_from_slice(self.cell(i, j));
            }
        }
        let degenerate = self
            .degenerate
            .iter()
            .filter_map(|&(i, j)| cols.iter().position(|&c| c == j).map(|jj| (i, jj)))
            .collect();
        CoefficientGrid {
            row_ids: self.row_ids.clone(),
            col_ids: cols.iter().map(|&j| self.col_ids[j].clone()).collect(),
            grid: self.grid,
            data,
            degenerate,
        }
    }
}

/// Runs the full representation pipeline on every cell.
///
/// Degenerate cells become zero vectors and are listed in
/// [`CoefficientGrid::degenerate_cells`]; the call fails when 10% or more of
/// the cells are degenerate.
pub fn transform_dataset(
    dataset: &TimeSeriesDataset,
    length: usize,
    method: Interpolation,
) -> Result<CoefficientGrid> {
    let grid = common_frequency_grid(dataset, length)?;
    let cells: Vec<Result<Option<Vec<f64>>>> = dataset
        .series
        .par_iter()
        .map_init(FftPlanner::new, |planner, ts| {
            let periodogram = periodogram_with(planner, ts);
            let interpolated = interpolate_periodogram(&periodogram, &grid, method)?;
            match log_normalize(&interpolated) {
                Ok(v) => Ok(Some(v)),
                Err(Error::DegenerateSignal(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let p = dataset.n_cols();
    let mut data = Vec::with_capacity(cells.len() * length);
    let mut degenerate = Vec::new();
    for (idx, cell) in cells.into_iter().enumerate() {
        match cell? {
            Some(v) => data.extend_from_slice(&v),
            None => {
                degenerate.push((idx / p, idx % p));
                data.extend(std::iter::repeat_n(0.0, length));
            }
        }
    }
    let total = dataset.series.len();
    if degenerate.len() * 10 >= total && !degenerate.is_empty() {
        return Err(Error::TooManyDegenerateCells {
            degenerate: degenerate.len(),
            total,
        });
    }
    CoefficientGrid::new(
        dataset.row_ids.clone(),
        dataset.col_ids.clone(),
        grid,
        data,
        degenerate,
    )
}
