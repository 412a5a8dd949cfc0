//! Repeated-run studies: the likelihood/ARI scatter and the comparison of
//! initialization strategies.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluation::{partition_views, quantile, PartitionViews};
use crate::inference::{run_concurrent, SemGibbsConfig};
use crate::init::{InitKind, InitStrategy};
use crate::model::{CoClusterStructure, PartitionPair};
use crate::signal::CoefficientGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub run: usize,
    pub seed: u64,
    pub log_likelihood: f64,
    pub row_ari: f64,
    pub col_ari: f64,
    pub block_ari: f64,
}

/// Runs `n_runs` independent chains (seeds `config.seed + r`) and scores each
/// against `truth`. Failed runs are left out.
pub fn likelihood_scatter(
    grid: &CoefficientGrid,
    truth: &PartitionPair,
    structure: &CoClusterStructure,
    config: &SemGibbsConfig,
    n_runs: usize,
    init: &InitStrategy,
) -> Result<Vec<ScatterPoint>> {
    let fit = run_concurrent(grid, structure, config, n_runs, init)?;
    let mut points = Vec::with_capacity(n_runs);
    for (run, outcome) in fit.runs.iter().enumerate() {
        if let Ok(res) = &outcome.result {
            let PartitionViews {
                row_ari,
                col_ari,
                block_ari,
            } = partition_views(&res.best_partition, truth)?;
            points.push(ScatterPoint {
                run,
                seed: outcome.seed,
                log_likelihood: res.best_log_likelihood,
                row_ari,
                col_ari,
                block_ari,
            });
        }
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSummary {
    pub strategy: String,
    pub runs: usize,
    pub failed: usize,
    pub block_ari_median: f64,
    pub block_ari_q90: f64,
    pub row_ari_median: f64,
    pub col_ari_median: f64,
    pub block_aris: Vec<f64>,
}

/// Median and 0.9 quantile of the block ARI over `n_runs` single chains per strategy.
pub fn compare_initializations(
    grid: &CoefficientGrid,
    truth: &PartitionPair,
    structure: &CoClusterStructure,
    config: &SemGibbsConfig,
    n_runs: usize,
    kinds: &[InitKind],
) -> Result<Vec<InitSummary>> {
    kinds
        .iter()
        .map(|&kind| {
            let points = likelihood_scatter(grid, truth, structure, config, n_runs, &InitStrategy::new(kind))?;
            let block: Vec<f64> = points.iter().map(|p| p.block_ari).collect();
            let row: Vec<f64> = points.iter().map(|p| p.row_ari).collect();
            let col: Vec<f64> = points.iter().map(|p| p.col_ari).collect();
            Ok(InitSummary {
                strategy: kind.name().to_string(),
                runs: n_runs,
                failed: n_runs - points.len(),
                block_ari_median: quantile(&block, 0.5),
                block_ari_q90: quantile(&block, 0.9),
                row_ari_median: quantile(&row, 0.5),
                col_ari_median: quantile(&col, 0.5),
                block_aris: block,
            })
        })
        .collect()
}

/// Fixed-width text table of the summaries.
pub fn format_init_table(summaries: &[InitSummary]) -> String {
    let mut out = format!("{:<10} {:>6} {:>8} {:>8} {:>8} {:>8}\n", "strategy", "failed", "median", "q90", "row_med", "col_med");
    for s in summaries {
        out.push_str(&format!(
            "{:<10} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            s.strategy, s.failed, s.block_ari_median, s.block_ari_q90, s.row_ari_median, s.col_ari_median
        ));
    }
    out
}
