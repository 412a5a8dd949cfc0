//! Synthetic conditional-block datasets.
//!
//! Every cell of block `(k, l)` is a shifted, noisy copy of the block's
//! prototype curve: one shift `t_s ~ N(0, s^2)` per cell, then
//! `x(u) = phi(u / (len - 1) + t_s) + e_u` with `e_u ~ N(0, s^2)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoClusterStructure, PartitionPair};
use crate::rng::{substream, Phase};
use crate::signal::{TimeSeries, TimeSeriesDataset};

/// Parametric curve on `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prototype {
    Sine { freq: f64, amplitude: f64 },
    Sigmoid { center: f64, slope: f64 },
    GaussianBump { center: f64, width: f64 },
    LinearRamp { slope: f64 },
    Constant { level: f64 },
    SquareWave { freq: f64 },
    DampedOscillation { freq: f64, decay: f64 },
}

impl Prototype {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Self::Sine { freq, amplitude } => amplitude * (2.0 * PI * freq * t).sin(),
            Self::Sigmoid { center, slope } => 1.0 / (1.0 + (-slope * (t - center)).exp()),
            Self::GaussianBump { center, width } => (-(t - center).powi(2) / (2.0 * width * width)).exp(),
            Self::LinearRamp { slope } => slope * t,
            Self::Constant { level } => level,
            Self::SquareWave { freq } => {
                if (2.0 * PI * freq * t).sin() >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Self::DampedOscillation { freq, decay } => (-decay * t).exp() * (2.0 * PI * freq * t).sin(),
        }
    }

    fn params(&self) -> Vec<f64> {
        match *self {
            Self::Sine { freq, amplitude } => vec![freq, amplitude],
            Self::Sigmoid { center, slope } => vec![center, slope],
            Self::GaussianBump { center, width } => vec![center, width],
            Self::LinearRamp { slope } => vec![slope],
            Self::Constant { level } => vec![level],
            Self::SquareWave { freq } => vec![freq],
            Self::DampedOscillation { freq, decay } => vec![freq, decay],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("prototype {self:?} has non-finite parameters")));
        }
        if let Self::GaussianBump { width, .. } = self {
            if *width <= 0.0 {
                return Err(Error::InvalidInput("gaussian bump width must be positive".into()));
            }
        }
        Ok(())
    }

    /// The prototype sampled at `u / (len - 1)`.
    pub fn sample(&self, len: usize) -> Vec<f64> {
        (0..len).map(|u| self.eval(grid_time(u, len))).collect()
    }
}

fn grid_time(u: usize, len: usize) -> f64 {
    if len > 1 {
        u as f64 / (len - 1) as f64
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeSpec {
    pub structure: CoClusterStructure,
    pub col_sizes: Vec<usize>,
    /// `row_sizes[l][k]`
    pub row_sizes: Vec<Vec<usize>>,
    /// `prototypes[l][k]`
    pub prototypes: Vec<Vec<Prototype>>,
    pub noise_sd: f64,
    pub series_length: usize,
    pub seed: u64,
}

impl GenerativeSpec {
    pub fn n_rows(&self) -> usize {
        self.row_sizes.first().map_or(0, |r| r.iter().sum())
    }

    pub fn n_cols(&self) -> usize {
        self.col_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.structure.col_clusters();
        if self.col_sizes.len() != l || self.row_sizes.len() != l || self.prototypes.len() != l {
            return Err(Error::InvalidInput("generative spec does not match the structure's L".into()));
        }
        if self.col_sizes.contains(&0) {
            return Err(Error::InvalidInput("column cluster sizes must be positive".into()));
        }
        let n = self.n_rows();
        for (c, (&k, (rows, protos))) in self
            .structure
            .row_clusters()
            .iter()
            .zip(self.row_sizes.iter().zip(&self.prototypes))
            .enumerate()
        {
            if rows.len() != k || protos.len() != k {
                return Err(Error::InvalidInput(format!("column cluster {c} expects {k} row sizes and prototypes")));
            }
            if rows.contains(&0) || rows.iter().sum::<usize>() != n {
                return Err(Error::InvalidInput(format!("row sizes of column cluster {c} must be positive and sum to {n}")));
            }
            for (a, pa) in protos.iter().enumerate() {
                pa.validate()?;
                if protos[..a].contains(pa) {
                    return Err(Error::InvalidInput(format!("column cluster {c} repeats prototype {pa:?}")));
                }
            }
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidInput("noise_sd must be positive".into()));
        }
        if self.series_length < 2 {
            return Err(Error::InvalidInput("series_length must be at least 2".into()));
        }
        Ok(())
    }

    /// Ground-truth labels of the contiguous block layout.
    pub fn truth(&self) -> PartitionPair {
        let expand = |sizes: &[usize]| -> Vec<usize> { sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect() };
        PartitionPair {
            col_labels: expand(&self.col_sizes),
            row_labels: self.row_sizes.iter().map(|r| expand(r)).collect(),
        }
    }
}

/// Draws one cell. `shift` overrides the random shift when given.
pub fn sample_cell(prototype: &Prototype, len: usize, noise_sd: f64, shift: Option<f64>, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, noise_sd).expect("noise_sd validated positive");
    let t_s = shift.unwrap_or_else(|| normal.sample(rng));
    (0..len)
        .map(|u| prototype.eval(grid_time(u, len) + t_s) + normal.sample(rng))
        .collect()
}

/// Generates the dataset and its ground truth. Rows are `r0..`, columns `c0..`.
pub fn generate(spec: &GenerativeSpec) -> Result<(TimeSeriesDataset, PartitionPair)> {
    spec.validate()?;
    let truth = spec.truth();
    let (n, p) = (spec.n_rows(), spec.n_cols());
    let interval = 1.0 / (spec.series_length - 1) as f64;
    let series = (0..n * p)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / p, idx % p);
            let (l, k) = truth.block_of(i, j);
            let mut rng = substream(spec.seed, 0, Phase::Datagen, idx as u64);
            let values = sample_cell(&spec.prototypes[l][k], spec.series_length, spec.noise_sd, None, &mut rng);
            TimeSeries::new(values, interval)
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = TimeSeriesDataset::new(
        (0..n).map(|i| format!("r{i}")).collect(),
        (0..p).map(|j| format!("c{j}")).collect(),
        series,
    )?;
    Ok((dataset, truth))
}

/// 90 x 90 benchmark: column clusters of sizes (45, 15, 30) with row
/// clusters (20, 40, 30), (60, 30) and (40, 50).
///
/// Prototypes: cluster 0 holds a sine with two periods, a square wave with
/// three periods and a linear ramp; cluster 1 a Gaussian bump and a square wave
/// with four periods; cluster 2 a constant and a one-period square wave. Column
/// clusters differ in spectral shape, since the representation drops phase.
pub fn benchmark_spec(seed: u64) -> GenerativeSpec {
    GenerativeSpec {
        structure: CoClusterStructure::new(vec![3, 2, 2]).expect("valid structure"),
        col_sizes: vec![45, 15, 30],
        row_sizes: vec![vec![20, 40, 30], vec![60, 30], vec![40, 50]],
        prototypes: vec![
            vec![
                Prototype::Sine { freq: 2.0, amplitude: 1.0 },
                Prototype::SquareWave { freq: 3.0 },
                Prototype::LinearRamp { slope: 1.0 },
            ],
            vec![
                Prototype::GaussianBump { center: 0.5, width: 0.08 },
                Prototype::SquareWave { freq: 4.0 },
            ],
            vec![Prototype::Constant { level: 0.5 }, Prototype::SquareWave { freq: 1.0 }],
        ],
        noise_sd: 0.02,
        series_length: 100,
        seed,
    }
}

pub fn benchmark_90x90(seed: u64) -> (TimeSeriesDataset, PartitionPair) {
    generate(&benchmark_spec(seed)).expect("benchmark spec is valid")
}
