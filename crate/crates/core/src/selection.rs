//! ICL scoring and structure search.
//!
//! Both strategies first pick the number of column clusters with the
//! shared-row block model, then search each column cluster's number of row
//! clusters separately, and finish with a full conditional-model run from
//! the assembled partition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::inference::{m_step, run_concurrent_with, RowCoupling, SemGibbsConfig, SemGibbsResult};
use crate::init::{random_partition, InitStrategy};
use crate::model::{complete_log_likelihood, CoClusterStructure, ModelState, PartitionPair};
use crate::signal::CoefficientGrid;

/// Conditional-model ICL:
/// `loglik - (L-1)/2 log p - 1/2 sum_l (K_l - 1) log n - (sum nu)/2 log(n p)`.
pub fn icl_score(loglik: f64, structure: &CoClusterStructure, n: usize, p: usize, block_param_counts: &[Vec<usize>]) -> f64 {
    let (nf, pf) = (n as f64, p as f64);
    let l = structure.col_clusters() as f64;
    let k_sum: f64 = structure.row_clusters().iter().map(|&k| k as f64 - 1.0).sum();
    let nu: usize = block_param_counts.iter().flatten().sum();
    loglik - 0.5 * (l - 1.0) * pf.ln() - 0.5 * k_sum * nf.ln() - 0.5 * nu as f64 * (nf * pf).ln()
}

/// Shared-row block-model ICL with a single `K`.
pub fn lbm_icl_score(loglik: f64, l: usize, k: usize, n: usize, p: usize, total_param_count: usize) -> f64 {
    let (nf, pf) = (n as f64, p as f64);
    loglik
        - 0.5 * (l as f64 - 1.0) * pf.ln()
        - 0.5 * (k as f64 - 1.0) * nf.ln()
        - 0.5 * total_param_count as f64 * (nf * pf).ln()
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of conditional structures with `L <= l_max` column clusters and
/// row-cluster counts in `1..=k_max`, up to column-cluster relabelling.
pub fn count_structures(l_max: usize, k_max: usize) -> u64 {
    (1..=l_max as u64).map(|l| binomial(k_max as u64 + l - 1, l)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    Grid,
    Greedy,
}

impl std::str::FromStr for SearchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Self::Grid),
            "greedy" => Ok(Self::Greedy),
            other => Err(Error::InvalidInput(format!("unknown search strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub l_max: usize,
    pub k_max: usize,
    pub runs_per_candidate: usize,
    pub strategy: SearchStrategy,
    pub sem: SemGibbsConfig,
    /// Initialization for the per-column-cluster row searches and the final run.
    pub init: InitStrategy,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            l_max: 5,
            k_max: 5,
            runs_per_candidate: 10,
            strategy: SearchStrategy::Grid,
            sem: SemGibbsConfig::default(),
            init: InitStrategy::default(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_max == 0 || self.k_max == 0 || self.runs_per_candidate == 0 {
            return Err(Error::InvalidInput("l_max, k_max and runs_per_candidate must be positive".into()));
        }
        self.sem.validate()
    }
}

/// One scored candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct IclEntry {
    pub structure: CoClusterStructure,
    pub icl: f64,
    pub log_likelihood: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct SelectionResult {
    pub best_structure: CoClusterStructure,
    pub best_result: SemGibbsResult,
    /// Conditional-model candidates: the per-cluster row searches, the
    /// assembled partition and the final run.
    pub icl_table: Vec<IclEntry>,
    /// Shared-row candidates scored with the block-model ICL; every entry has equal K.
    pub lbm_table: Vec<IclEntry>,
    pub search_candidates: usize,
    pub refinement_candidates: usize,
    pub candidates_evaluated: usize,
    /// Iterations of the greedy walk; zero for the grid strategy.
    pub greedy_iterations: usize,
    /// Candidates whose fit failed and were scored `-inf`.
    pub skipped: Vec<String>,
}

/// Shared-row block model with `L` column clusters and `K` row clusters.
pub fn funlbm_fit(grid: &CoefficientGrid, k: usize, l: usize, config: &SemGibbsConfig, n_runs: usize) -> Result<SemGibbsResult> {
    let structure = CoClusterStructure::uniform(l, k)?;
    let (n, p) = (grid.n_rows(), grid.n_cols());
    let fit = run_concurrent_with(grid, &structure, config, n_runs, RowCoupling::Shared, |seed| {
        let mut part = random_partition(&structure, n, p, seed);
        let shared = part.row_labels[0].clone();
        part.row_labels.iter_mut().for_each(|r| r.clone_from(&shared));
        Ok(part)
    })?;
    Ok(fit.best)
}

fn is_skippable(e: &Error) -> bool {
    matches!(e, Error::DegenerateStructure(_) | Error::InvalidStructure(_) | Error::Numeric(_))
}

fn lbm_candidate(grid: &CoefficientGrid, k: usize, l: usize, config: &SelectionConfig, seed: u64) -> (IclEntry, Result<SemGibbsResult>) {
    let structure = CoClusterStructure::uniform(l, k).expect("positive sizes");
    let res = funlbm_fit(grid, k, l, &config.sem.with_seed(seed), config.runs_per_candidate);
    let entry = match &res {
        Ok(fit) => {
            let nu: usize = fit.best_state.parameter_counts().iter().flatten().sum();
            IclEntry {
                structure,
                icl: lbm_icl_score(fit.best_log_likelihood, l, k, grid.n_rows(), grid.n_cols(), nu),
                log_likelihood: fit.best_log_likelihood,
                converged: fit.converged,
            }
        }
        Err(_) => IclEntry {
            structure,
            icl: f64::NEG_INFINITY,
            log_likelihood: f64::NEG_INFINITY,
            converged: false,
        },
    };
    (entry, res)
}

fn argmax(entries: &[IclEntry]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in entries.iter().enumerate() {
        if e.icl > f64::NEG_INFINITY && best.is_none_or(|b| e.icl > entries[b].icl) {
            best = Some(i);
        }
    }
    best
}

fn neg_inf_entry(structure: CoClusterStructure) -> IclEntry {
    IclEntry {
        structure,
        icl: f64::NEG_INFINITY,
        log_likelihood: f64::NEG_INFINITY,
        converged: false,
    }
}

/// Row-membership and cell terms of column cluster `l` in the complete-data log-likelihood.
fn cluster_log_likelihood(grid: &CoefficientGrid, partition: &PartitionPair, state: &ModelState, l: usize) -> f64 {
    let rows = &partition.row_labels[l];
    let membership: f64 = rows.iter().map(|&k| state.pi()[l][k].ln()).sum();
    let mut cells = 0.0;
    for (j, _) in partition.col_labels.iter().enumerate().filter(|(_, &w)| w == l) {
        for (i, &k) in rows.iter().enumerate() {
            cells += state.block(l, k).log_density(grid.cell(i, j));
        }
    }
    membership + cells
}

/// Penalty of one column cluster with `k` row clusters and `nu` block parameters in total.
fn cluster_penalty(k: usize, nu: usize, n: usize, p: usize) -> f64 {
    0.5 * (k as f64 - 1.0) * (n as f64).ln() + 0.5 * nu as f64 * ((n * p) as f64).ln()
}

fn direct_result(grid: &CoefficientGrid, partition: &PartitionPair, structure: &CoClusterStructure, config: &SemGibbsConfig) -> Result<(IclEntry, SemGibbsResult)> {
    let state = m_step(grid, partition, structure, config.subspace_dim)?;
    let ll = complete_log_likelihood(grid, partition, &state);
    let icl = icl_score(ll, structure, grid.n_rows(), grid.n_cols(), &state.parameter_counts());
    let entry = IclEntry {
        structure: structure.clone(),
        icl,
        log_likelihood: ll,
        converged: true,
    };
    let result = SemGibbsResult {
        best_state: state,
        best_partition: partition.clone(),
        best_log_likelihood: ll,
        likelihood_trace: vec![ll],
        iterations_run: 0,
        degeneracy_events: 0,
        converged: true,
    };
    Ok((entry, result))
}

/// Where a conditional-model table entry came from, to rebuild its fit on demand.
enum Source {
    /// Column cluster `l` takes rows from its row-search fit; the others keep the shared rows.
    RowSearch { l: usize, rows: Vec<usize> },
    Fitted(Box<SemGibbsResult>),
}

struct Refinement {
    entries: Vec<IclEntry>,
    sources: Vec<Source>,
    candidates: usize,
    skipped: Vec<String>,
}

/// Per-column-cluster row search from the shared-row winner, assembly of the
/// best row partition of every cluster, and a final conditional run.
///
/// With the column partition fixed, the ICL is a constant plus one term per
/// column cluster, so each cluster's `K` is chosen independently.
fn refine(grid: &CoefficientGrid, seed_fit: &SemGibbsResult, config: &SelectionConfig, seed_base: u64) -> Result<Refinement> {
    let structure_hat = seed_fit.best_state.structure().clone();
    let l_hat = structure_hat.col_clusters();
    let k_hat = structure_hat.row_clusters()[0];
    let (n, p) = (grid.n_rows(), grid.n_cols());
    let winner = &seed_fit.best_partition;
    let cols_in = winner.columns_by_cluster(l_hat);
    let mut skipped = Vec::new();

    let frozen_state = m_step(grid, winner, &structure_hat, config.sem.subspace_dim)?;
    let frozen_nu = frozen_state.parameter_counts();
    let frozen: Vec<f64> = (0..l_hat)
        .map(|l| cluster_log_likelihood(grid, winner, &frozen_state, l) - cluster_penalty(k_hat, frozen_nu[l].iter().sum(), n, p))
        .collect();
    let constant = winner.col_labels.iter().map(|&w| frozen_state.rho()[w].ln()).sum::<f64>()
        - 0.5 * (l_hat as f64 - 1.0) * (p as f64).ln();

    // candidate `idx = l * k_max + (k - 1)` fits one column cluster's sub-grid with L = 1
    let tasks: Vec<(usize, usize)> = (0..l_hat).flat_map(|l| (1..=config.k_max).map(move |k| (l, k))).collect();
    let sub_fits: Vec<Result<SemGibbsResult>> = tasks
        .par_iter()
        .enumerate()
        .map(|(idx, &(l, k))| {
            let sub = grid.select_columns(&cols_in[l]);
            let structure = CoClusterStructure::new(vec![k])?;
            let sem = config.sem.with_seed(seed_base + idx as u64);
            run_concurrent_with(&sub, &structure, &sem, config.runs_per_candidate, RowCoupling::Conditional, |s| {
                config.init.initialize(&sub, &structure, &sem, s)
            })
            .map(|fit| fit.best)
        })
        .collect();

    let mut entries = Vec::new();
    let mut sources = Vec::new();
    // per cluster: (score, K, rows); the shared-row choice competes with every searched K
    let mut chosen: Vec<(f64, usize, Vec<usize>)> = (0..l_hat).map(|l| (frozen[l], k_hat, winner.row_labels[l].clone())).collect();
    let frozen_total: f64 = frozen.iter().sum();
    for (&(l, k), fit) in tasks.iter().zip(sub_fits) {
        let mut ks = vec![k_hat; l_hat];
        ks[l] = k;
        let structure = CoClusterStructure::new(ks)?;
        match fit {
            Ok(fit) => {
                // the sub-grid's column term is log 1 = 0
                let nu: usize = fit.best_state.parameter_counts()[0].iter().sum();
                let score = fit.best_log_likelihood - cluster_penalty(k, nu, n, p);
                let rows = fit.best_partition.row_labels[0].clone();
                if score > chosen[l].0 {
                    chosen[l] = (score, k, rows.clone());
                }
                entries.push(IclEntry {
                    structure,
                    icl: constant + frozen_total - frozen[l] + score,
                    log_likelihood: fit.best_log_likelihood,
                    converged: fit.converged,
                });
                sources.push(Source::RowSearch { l, rows });
            }
            Err(e) if is_skippable(&e) => {
                skipped.push(format!("{structure} (row search of cluster {l}): {e}"));
                entries.push(neg_inf_entry(structure));
                sources.push(Source::RowSearch { l, rows: Vec::new() });
            }
            Err(e) => return Err(e),
        }
    }

    let assembled_structure = CoClusterStructure::new(chosen.iter().map(|c| c.1).collect())?;
    let assembled = PartitionPair {
        col_labels: winner.col_labels.clone(),
        row_labels: chosen.into_iter().map(|c| c.2).collect(),
    };
    let (entry, result) = direct_result(grid, &assembled, &assembled_structure, &config.sem)?;
    entries.push(entry);
    sources.push(Source::Fitted(Box::new(result)));

    let sem = config.sem.with_seed(seed_base + tasks.len() as u64);
    match run_concurrent_with(grid, &assembled_structure, &sem, config.runs_per_candidate, RowCoupling::Conditional, |_| {
        Ok(assembled.clone())
    }) {
        Ok(fit) => {
            let best = fit.best;
            entries.push(IclEntry {
                structure: assembled_structure.clone(),
                icl: icl_score(best.best_log_likelihood, &assembled_structure, n, p, &best.best_state.parameter_counts()),
                log_likelihood: best.best_log_likelihood,
                converged: best.converged,
            });
            sources.push(Source::Fitted(Box::new(best)));
        }
        Err(e) if is_skippable(&e) => skipped.push(format!("final run {assembled_structure}: {e}")),
        Err(e) => return Err(e),
    }
    Ok(Refinement {
        entries,
        sources,
        candidates: tasks.len() + 1,
        skipped,
    })
}

fn finish(
    grid: &CoefficientGrid,
    config: &SelectionConfig,
    seed_fit: &SemGibbsResult,
    refinement: Refinement,
    lbm_table: Vec<IclEntry>,
    search_candidates: usize,
    greedy_iterations: usize,
    mut skipped: Vec<String>,
) -> Result<SelectionResult> {
    let Refinement {
        entries,
        sources,
        candidates,
        skipped: more,
    } = refinement;
    skipped.extend(more);
    let best = argmax(&entries).ok_or_else(|| Error::DegenerateStructure("every candidate structure degenerated".into()))?;
    let best_structure = entries[best].structure.clone();
    let best_result = match sources.into_iter().nth(best).expect("one source per entry") {
        Source::Fitted(res) => *res,
        Source::RowSearch { l, rows } => {
            let mut part = seed_fit.best_partition.clone();
            part.row_labels[l] = rows;
            direct_result(grid, &part, &best_structure, &config.sem)?.1
        }
    };
    Ok(SelectionResult {
        best_structure,
        best_result,
        icl_table: entries,
        lbm_table,
        search_candidates,
        refinement_candidates: candidates,
        candidates_evaluated: search_candidates + candidates,
        greedy_iterations,
        skipped,
    })
}

fn evaluate_lbm(grid: &CoefficientGrid, k: usize, l: usize, config: &SelectionConfig, seed: u64) -> Result<(IclEntry, Option<SemGibbsResult>, Option<String>)> {
    let (entry, res) = lbm_candidate(grid, k, l, config, seed);
    match res {
        Ok(fit) => Ok((entry, Some(fit), None)),
        Err(e) if is_skippable(&e) => Ok((entry, None, Some(format!("{}: {e}", CoClusterStructure::uniform(l, k)?)))),
        Err(e) => Err(e),
    }
}

/// Exhaustive shared-row search over `[1, K_max] x [1, L_max]`, then row refinement.
pub fn select_grid(grid: &CoefficientGrid, config: &SelectionConfig) -> Result<SelectionResult> {
    config.validate()?;
    let base = config.sem.seed;
    // candidate index `(l - 1) * k_max + (k - 1)`
    let tasks: Vec<(usize, usize)> = (1..=config.l_max).flat_map(|l| (1..=config.k_max).map(move |k| (k, l))).collect();
    let evaluated: Vec<_> = tasks
        .par_iter()
        .enumerate()
        .map(|(idx, &(k, l))| evaluate_lbm(grid, k, l, config, base + idx as u64))
        .collect::<Result<Vec<_>>>()?;
    let mut lbm_table = Vec::with_capacity(tasks.len());
    let mut fits = Vec::with_capacity(tasks.len());
    let mut skipped = Vec::new();
    for (entry, fit, note) in evaluated {
        lbm_table.push(entry);
        fits.push(fit);
        skipped.extend(note);
    }
    let winner = argmax(&lbm_table).ok_or_else(|| Error::DegenerateStructure("every shared-row candidate degenerated".into()))?;
    let seed_fit = fits[winner].take().expect("finite entries have fits");
    let refinement = refine(grid, &seed_fit, config, base + tasks.len() as u64)?;
    let result = finish(grid, config, &seed_fit, refinement, lbm_table, tasks.len(), 0, skipped)?;
    debug_assert!(result.candidates_evaluated <= config.k_max * config.l_max + seed_fit.best_state.structure().col_clusters() * config.k_max + 1);
    Ok(result)
}

/// Greedy shared-row walk from `(K, L) = (1, 1)`, then row refinement.
///
/// Each step scores `(K + 1, L)` and `(K, L + 1)` and moves to the better one
/// if it improves the ICL.
pub fn select_greedy(grid: &CoefficientGrid, config: &SelectionConfig) -> Result<SelectionResult> {
    config.validate()?;
    let base = config.sem.seed;
    let mut cache: BTreeMap<(usize, usize), (IclEntry, Option<SemGibbsResult>)> = BTreeMap::new();
    let mut lbm_table = Vec::new();
    let mut skipped = Vec::new();
    let mut next_index = 0u64;
    let mut evaluate = |k: usize, l: usize, cache: &mut BTreeMap<(usize, usize), (IclEntry, Option<SemGibbsResult>)>| -> Result<f64> {
        if let Some((e, _)) = cache.get(&(k, l)) {
            return Ok(e.icl);
        }
        let (entry, fit, note) = evaluate_lbm(grid, k, l, config, base + next_index)?;
        next_index += 1;
        skipped.extend(note);
        lbm_table.push(entry.clone());
        let icl = entry.icl;
        cache.insert((k, l), (entry, fit));
        Ok(icl)
    };

    let (mut k, mut l) = (1, 1);
    let mut current = evaluate(k, l, &mut cache)?;
    let mut iterations = 0;
    loop {
        let mut moves = Vec::new();
        if k < config.k_max {
            moves.push((k + 1, l));
        }
        if l < config.l_max {
            moves.push((k, l + 1));
        }
        if moves.is_empty() {
            break;
        }
        iterations += 1;
        let mut best_move = None;
        for &(mk, ml) in &moves {
            let icl = evaluate(mk, ml, &mut cache)?;
            if icl > current && best_move.is_none_or(|(_, _, b)| icl > b) {
                best_move = Some((mk, ml, icl));
            }
        }
        match best_move {
            Some((mk, ml, icl)) => {
                (k, l, current) = (mk, ml, icl);
            }
            None => break,
        }
    }
    let search_candidates = next_index as usize;
    let seed_fit = cache
        .remove(&(k, l))
        .and_then(|(_, fit)| fit)
        .ok_or_else(|| Error::DegenerateStructure("the greedy starting structure degenerated".into()))?;
    let refinement = refine(grid, &seed_fit, config, base + search_candidates as u64)?;
    debug_assert!(search_candidates <= 2 * (config.l_max + config.k_max));
    finish(grid, config, &seed_fit, refinement, lbm_table, search_candidates, iterations, skipped)
}

/// Runs the configured strategy.
pub fn select(grid: &CoefficientGrid, config: &SelectionConfig) -> Result<SelectionResult> {
    match config.strategy {
        SearchStrategy::Grid => select_grid(grid, config),
        SearchStrategy::Greedy => select_greedy(grid, config),
    }
}
