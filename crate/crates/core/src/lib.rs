//! Co-clustering of multivariate time series with a conditional latent
//! block model.
//!
//! Data are rows (observations) by columns (features) of univariate time
//! series. Columns are grouped into clusters, and every column cluster has
//! its own partition of the rows. Each series is represented by a
//! normalized log-periodogram on a shared frequency grid; each block
//! (row cluster within a column cluster) is a Gaussian in its own
//! principal subspace. Parameters and partitions are estimated with a
//! SEM-Gibbs sampler, and the structure is chosen by ICL.
//!
//! Typical flow: [`signal::transform_dataset`], then
//! [`inference::run_concurrent`] for a known structure or
//! [`selection::select`] to choose it, then [`evaluation::partition_views`]
//! against a reference.

pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod inference;
pub mod init;
pub mod io;
pub mod kmeans;
pub mod model;
pub mod rng;
pub mod selection;
pub mod signal;

pub use error::{Error, Result};
pub use inference::{run_concurrent, run_sem_gibbs, SemGibbsConfig, SemGibbsResult, SubspaceDim};
pub use init::{InitKind, InitStrategy};
pub use model::{BlockParams, CoClusterStructure, ModelState, PartitionPair};
pub use selection::{select, select_greedy, select_grid, SelectionConfig, SelectionResult};
pub use signal::{CoefficientGrid, Interpolation, TimeSeries, TimeSeriesDataset};
