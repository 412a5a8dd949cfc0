//! Block parameterization and densities of the conditional latent block model.
//!
//! Column cluster `l` owns its own row partition with `K_l` row clusters.
//! Block `(k, l)` models a cell's coefficient vector `c` through its
//! projection `v = A^T c` on a block-specific orthonormal basis `A`, with a
//! Gaussian density `N(v; mu, Sigma)` in that subspace.

use nalgebra::{Cholesky, DMatrix, DMatrixView, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};
use crate::signal::CoefficientGrid;

/// Number of column clusters and the row-cluster count for each of them.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CoClusterStructure {
    row_clusters: Vec<usize>,
}

impl CoClusterStructure {
    pub fn new(row_clusters: Vec<usize>) -> Result<Self> {
        if row_clusters.is_empty() {
            return Err(Error::InvalidStructure("need at least one column cluster".into()));
        }
        if row_clusters.contains(&0) {
            return Err(Error::InvalidStructure("every column cluster needs at least one row cluster".into()));
        }
        Ok(Self { row_clusters })
    }

    /// `L` column clusters, each with `k` row clusters.
    pub fn uniform(col_clusters: usize, k: usize) -> Result<Self> {
        Self::new(vec![k; col_clusters])
    }

    pub fn col_clusters(&self) -> usize {
        self.row_clusters.len()
    }

    pub fn row_clusters(&self) -> &[usize] {
        &self.row_clusters
    }

    pub fn max_row_clusters(&self) -> usize {
        self.row_clusters.iter().copied().max().unwrap_or(0)
    }

    pub fn n_blocks(&self) -> usize {
        self.row_clusters.iter().sum()
    }

    /// Structure error against a reference: `|L - L'|` plus the number of
    /// mismatched row-cluster counts once both K lists are sorted and paired.
    pub fn distance(&self, other: &CoClusterStructure) -> usize {
        let mut a = self.row_clusters.clone();
        let mut b = other.row_clusters.clone();
        a.sort_unstable();
        b.sort_unstable();
        let mismatched = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        self.col_clusters().abs_diff(other.col_clusters()) + mismatched
    }

    /// True when both have the same `L` and the same multiset of `K_l`.
    pub fn same_multiset(&self, other: &CoClusterStructure) -> bool {
        let mut a = self.row_clusters.clone();
        let mut b = other.row_clusters.clone();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }

    pub fn k_list(&self) -> String {
        self.row_clusters
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl fmt::Display for CoClusterStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L={} K=({})", self.col_clusters(), self.k_list())
    }
}

/// Gaussian-in-subspace parameters of one block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    loadings: DMatrix<f64>,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
    /// `L^-1 A^T` and `L^-1 mu`, with `L L^T` the covariance.
    whitener: DMatrix<f64>,
    whitened_mean: DVector<f64>,
    log_norm: f64,
}

const ORTHONORMAL_TOL: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-10;

impl BlockParams {
    /// Validates the parameters and caches the Cholesky factor of the covariance.
    pub fn new(loadings: DMatrix<f64>, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = loadings.ncols();
        if d == 0 || loadings.nrows() < d {
            return Err(Error::InvalidInput(format!(
                "loadings must be m x d with 1 <= d <= m, got {} x {d}",
                loadings.nrows()
            )));
        }
        if mean.len() != d || covariance.shape() != (d, d) {
            return Err(Error::InvalidInput(format!(
                "mean/covariance dimensions {} / {:?} do not match d = {d}",
                mean.len(),
                covariance.shape()
            )));
        }
        if loadings.iter().chain(mean.iter()).chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("block parameters contain non-finite values".into()));
        }
        let gram = loadings.tr_mul(&loadings);
        let ortho_err = (gram - DMatrix::identity(d, d)).amax();
        if ortho_err > ORTHONORMAL_TOL {
            return Err(Error::Numeric(format!("loadings are not orthonormal (error {ortho_err:e})")));
        }
        let asym = (&covariance - covariance.transpose()).amax();
        if asym > SYMMETRY_TOL * covariance.amax().max(1.0) {
            return Err(Error::Numeric(format!("covariance is not symmetric (error {asym:e})")));
        }
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let chol = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
        let chol_lower = chol.l();
        let log_det = 2.0 * chol_lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = -0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * log_det;
        let whitener = chol_lower
            .solve_lower_triangular(&loadings.transpose())
            .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
        let whitened_mean = chol_lower
            .solve_lower_triangular(&mean)
            .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
        Ok(Self {
            loadings,
            mean,
            covariance,
            chol_lower,
            whitener,
            whitened_mean,
            log_norm,
        })
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Subspace dimension `d`.
    pub fn dim(&self) -> usize {
        self.loadings.ncols()
    }

    /// Coefficient vector length `m`.
    pub fn coeff_len(&self) -> usize {
        self.loadings.nrows()
    }

    /// Free parameter count `m d + d + d (d + 1) / 2` used by the ICL penalty.
    pub fn parameter_count(&self) -> usize {
        let (m, d) = (self.coeff_len(), self.dim());
        m * d + d + d * (d + 1) / 2
    }

    pub fn project(&self, c: &[f64]) -> DVector<f64> {
        self.loadings.tr_mul(&DVector::from_column_slice(c))
    }

    /// `A A^T c`, the cell rebuilt from its subspace coordinates.
    pub fn reconstruct(&self, c: &[f64]) -> Vec<f64> {
        (&self.loadings * self.project(c)).as_slice().to_vec()
    }

    pub fn log_density(&self, c: &[f64]) -> f64 {
        let mut v = self.project(c);
        v -= &self.mean;
        self.chol_lower.solve_lower_triangular_mut(&mut v);
        self.log_norm - 0.5 * v.norm_squared()
    }

    /// Log-density of every column of `cells` (an `m x N` matrix).
    pub fn log_density_columns(&self, cells: &DMatrixView<f64>) -> Vec<f64> {
        let v = &self.whitener * cells;
        v.column_iter()
            .map(|col| {
                let sq: f64 = col.iter().zip(self.whitened_mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                self.log_norm - 0.5 * sq
            })
            .collect()
    }
}

pub fn block_log_density(c: &[f64], params: &BlockParams) -> f64 {
    params.log_density(c)
}

/// Column labels `w` and one row labelling `z^l` per column cluster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPair {
    pub col_labels: Vec<usize>,
    pub row_labels: Vec<Vec<usize>>,
}

impl PartitionPair {
    pub fn validate(&self, structure: &CoClusterStructure, n: usize, p: usize) -> Result<()> {
        if self.col_labels.len() != p {
            return Err(Error::InvalidInput(format!(
                "partition has {} column labels, expected {p}",
                self.col_labels.len()
            )));
        }
        if self.row_labels.len() != structure.col_clusters() {
            return Err(Error::InvalidInput(format!(
                "partition has {} row labellings, expected {}",
                self.row_labels.len(),
                structure.col_clusters()
            )));
        }
        if let Some(&bad) = self.col_labels.iter().find(|&&w| w >= structure.col_clusters()) {
            return Err(Error::InvalidInput(format!("column label {bad} out of range")));
        }
        for (l, rows) in self.row_labels.iter().enumerate() {
            if rows.len() != n {
                return Err(Error::InvalidInput(format!(
                    "row labelling {l} has {} labels, expected {n}",
                    rows.len()
                )));
            }
            if let Some(&bad) = rows.iter().find(|&&z| z >= structure.row_clusters()[l]) {
                return Err(Error::InvalidInput(format!("row label {bad} out of range in column cluster {l}")));
            }
        }
        Ok(())
    }

    /// Builds the structure implied by the label ranges (max label + 1).
    pub fn infer_structure(&self) -> Result<CoClusterStructure> {
        let l = self.col_labels.iter().copied().max().map_or(0, |m| m + 1).max(self.row_labels.len());
        let ks = (0..l)
            .map(|c| {
                self.row_labels
                    .get(c)
                    .and_then(|rows| rows.iter().copied().max())
                    .map_or(1, |m| m + 1)
            })
            .collect();
        CoClusterStructure::new(ks)
    }

    pub fn n_rows(&self) -> usize {
        self.row_labels.first().map_or(0, Vec::len)
    }

    pub fn n_cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn col_counts(&self, structure: &CoClusterStructure) -> Vec<usize> {
        counts(&self.col_labels, structure.col_clusters())
    }

    pub fn row_counts(&self, structure: &CoClusterStructure, l: usize) -> Vec<usize> {
        counts(&self.row_labels[l], structure.row_clusters()[l])
    }

    /// Columns assigned to each column cluster, in increasing order.
    pub fn columns_by_cluster(&self, n_clusters: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_clusters];
        for (j, &w) in self.col_labels.iter().enumerate() {
            out[w].push(j);
        }
        out
    }

    /// Label of cell `(i, j)` as `(column cluster, row cluster)`.
    pub fn block_of(&self, i: usize, j: usize) -> (usize, usize) {
        let l = self.col_labels[j];
        (l, self.row_labels[l][i])
    }
}

pub(crate) fn counts(labels: &[usize], n_clusters: usize) -> Vec<usize> {
    let mut out = vec![0; n_clusters];
    for &z in labels {
        out[z] += 1;
    }
    out
}

/// Mixing proportions and block parameters of a fitted model.
#[derive(Clone, Debug)]
pub struct ModelState {
    structure: CoClusterStructure,
    rho: Vec<f64>,
    pi: Vec<Vec<f64>>,
    /// `blocks[l][k]`
    blocks: Vec<Vec<BlockParams>>,
}

const SIMPLEX_TOL: f64 = 1e-10;

fn check_simplex(name: &str, v: &[f64]) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || v.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Numeric(format!("{name} is not a positive probability vector: {v:?}")));
    }
    Ok(())
}

impl ModelState {
    pub fn new(
        structure: CoClusterStructure,
        rho: Vec<f64>,
        pi: Vec<Vec<f64>>,
        blocks: Vec<Vec<BlockParams>>,
    ) -> Result<Self> {
        let l = structure.col_clusters();
        if rho.len() != l || pi.len() != l || blocks.len() != l {
            return Err(Error::InvalidInput("model state does not match the structure's L".into()));
        }
        check_simplex("rho", &rho)?;
        let m = blocks[0].first().map(BlockParams::coeff_len);
        for c in 0..l {
            let k = structure.row_clusters()[c];
            if pi[c].len() != k || blocks[c].len() != k {
                return Err(Error::InvalidInput(format!(
                    "column cluster {c} expects {k} row clusters"
                )));
            }
            check_simplex(&format!("pi[{c}]"), &pi[c])?;
            if blocks[c].iter().any(|b| Some(b.coeff_len()) != m) {
                return Err(Error::InvalidInput("blocks disagree on coefficient length".into()));
            }
        }
        Ok(Self {
            structure,
            rho,
            pi,
            blocks,
        })
    }

    pub fn structure(&self) -> &CoClusterStructure {
        &self.structure
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn pi(&self) -> &[Vec<f64>] {
        &self.pi
    }

    pub fn block(&self, l: usize, k: usize) -> &BlockParams {
        &self.blocks[l][k]
    }

    pub fn blocks(&self) -> &[Vec<BlockParams>] {
        &self.blocks
    }

    pub fn coeff_len(&self) -> usize {
        self.blocks[0][0].coeff_len()
    }

    /// `nu_k^l` for every block, indexed `[l][k]`.
    pub fn parameter_counts(&self) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .map(|bs| bs.iter().map(BlockParams::parameter_count).collect())
            .collect()
    }

    /// Swaps column clusters and row clusters consistently; used to check
    /// label-switching invariance. `col_perm[new] = old`, `row_perm[new_l][new_k] = old_k`.
    pub fn permuted(&self, col_perm: &[usize], row_perm: &[Vec<usize>]) -> Result<Self> {
        let ks: Vec<usize> = col_perm.iter().map(|&old| self.structure.row_clusters()[old]).collect();
        let rho = col_perm.iter().map(|&old| self.rho[old]).collect();
        let pi = col_perm
            .iter()
            .zip(row_perm)
            .map(|(&old, rp)| rp.iter().map(|&ok| self.pi[old][ok]).collect())
            .collect();
        let blocks = col_perm
            .iter()
            .zip(row_perm)
            .map(|(&old, rp)| rp.iter().map(|&ok| self.blocks[old][ok].clone()).collect())
            .collect();
        ModelState::new(CoClusterStructure::new(ks)?, rho, pi, blocks)
    }
}

/// `m x (n p)` column-major view of the grid; column `i * p + j` is cell `(i, j)`.
pub(crate) fn cell_matrix(grid: &CoefficientGrid) -> DMatrixView<'_, f64> {
    DMatrixView::from_slice(grid.data(), grid.dim(), grid.n_cells())
}

/// Log-density of every cell under every block, `values[l][k][i * p + j]`.
#[derive(Clone, Debug)]
pub struct DensityTable {
    n_cols: usize,
    values: Vec<Vec<Vec<f64>>>,
}

impl DensityTable {
    pub fn compute(grid: &CoefficientGrid, state: &ModelState) -> Self {
        let cells = cell_matrix(grid);
        let index: Vec<(usize, usize)> = state
            .structure
            .row_clusters()
            .iter()
            .enumerate()
            .flat_map(|(l, &k)| (0..k).map(move |kk| (l, kk)))
            .collect();
        let mut flat: Vec<Vec<f64>> = index
            .par_iter()
            .map(|&(l, k)| state.blocks[l][k].log_density_columns(&cells))
            .collect();
        let mut values = Vec::with_capacity(state.structure.col_clusters());
        for &k in state.structure.row_clusters().iter().rev() {
            let tail = flat.split_off(flat.len() - k);
            values.push(tail);
        }
        values.reverse();
        Self {
            n_cols: grid.n_cols(),
            values,
        }
    }

    #[inline]
    pub fn get(&self, l: usize, k: usize, i: usize, j: usize) -> f64 {
        self.values[l][k][i * self.n_cols + j]
    }
}

/// `log f_k^l(c_i.)`: sum over the columns of cluster `l` of the cell log-densities under block `(k, l)`.
pub fn row_log_density(row: &[&[f64]], col_labels: &[usize], l: usize, k: usize, state: &ModelState) -> f64 {
    let block = state.block(l, k);
    row.iter()
        .zip(col_labels)
        .filter(|(_, &w)| w == l)
        .map(|(c, _)| block.log_density(c))
        .sum()
}

/// `log g_l(c_.j)`: each row contributes under its own row cluster in column cluster `l`.
pub fn column_log_density(col: &[&[f64]], row_labels: &[Vec<usize>], l: usize, state: &ModelState) -> f64 {
    col.iter()
        .zip(&row_labels[l])
        .map(|(c, &k)| state.block(l, k).log_density(c))
        .sum()
}

/// Log of the complete-data density `p(c, z, w; theta)`.
pub fn complete_log_likelihood(grid: &CoefficientGrid, partition: &PartitionPair, state: &ModelState) -> f64 {
    let column_terms: f64 = partition.col_labels.iter().map(|&w| state.rho[w].ln()).sum();
    let row_terms: f64 = partition
        .row_labels
        .iter()
        .enumerate()
        .map(|(l, rows)| rows.iter().map(|&k| state.pi[l][k].ln()).sum::<f64>())
        .sum();
    let mut cell_terms = 0.0;
    for i in 0..grid.n_rows() {
        for j in 0..grid.n_cols() {
            let (l, k) = partition.block_of(i, j);
            cell_terms += state.block(l, k).log_density(grid.cell(i, j));
        }
    }
    column_terms + row_terms + cell_terms
}

/// Same value as [`complete_log_likelihood`] from a precomputed table.
/// With `shared_rows`, the row-membership term is counted once (the
/// standard block model with one row partition).
pub(crate) fn complete_log_likelihood_table(
    table: &DensityTable,
    partition: &PartitionPair,
    state: &ModelState,
    shared_rows: bool,
) -> f64 {
    let column_terms: f64 = partition.col_labels.iter().map(|&w| state.rho[w].ln()).sum();
    let row_terms: f64 = if shared_rows {
        partition.row_labels[0].iter().map(|&k| state.pi[0][k].ln()).sum()
    } else {
        partition
            .row_labels
            .iter()
            .enumerate()
            .map(|(l, rows)| rows.iter().map(|&k| state.pi[l][k].ln()).sum::<f64>())
            .sum()
    };
    let n = partition.n_rows();
    let mut cell_terms = 0.0;
    for i in 0..n {
        for (j, &l) in partition.col_labels.iter().enumerate() {
            cell_terms += table.get(l, partition.row_labels[l][i], i, j);
        }
    }
    column_terms + row_terms + cell_terms
}

// Serialized forms. Matrices are row-major with explicit dimensions.

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixFile {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    fn into_matrix(self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::InvalidInput(format!(
                "matrix declares {} x {} but holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct BlockFile {
    col_cluster: usize,
    row_cluster: usize,
    loadings: MatrixFile,
    mean: Vec<f64>,
    covariance: MatrixFile,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    col_clusters: usize,
    row_clusters: Vec<usize>,
    coeff_len: usize,
    rho: Vec<f64>,
    pi: Vec<Vec<f64>>,
    blocks: Vec<BlockFile>,
}

impl Serialize for ModelState {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(l, bs)| {
                bs.iter().enumerate().map(move |(k, b)| BlockFile {
                    col_cluster: l,
                    row_cluster: k,
                    loadings: MatrixFile::from_matrix(&b.loadings),
                    mean: b.mean.as_slice().to_vec(),
                    covariance: MatrixFile::from_matrix(&b.covariance),
                })
            })
            .collect();
        ModelFile {
            col_clusters: self.structure.col_clusters(),
            row_clusters: self.structure.row_clusters().to_vec(),
            coeff_len: self.coeff_len(),
            rho: self.rho.clone(),
            pi: self.pi.clone(),
            blocks,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ModelState {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = ModelFile::deserialize(deserializer)?;
        model_from_file(file).map_err(serde::de::Error::custom)
    }
}

fn model_from_file(file: ModelFile) -> Result<ModelState> {
    if file.row_clusters.len() != file.col_clusters {
        return Err(Error::InvalidInput("row_clusters length differs from col_clusters".into()));
    }
    let structure = CoClusterStructure::new(file.row_clusters)?;
    let mut slots: Vec<Vec<Option<BlockParams>>> =
        structure.row_clusters().iter().map(|&k| vec![None; k]).collect();
    for b in file.blocks {
        let slot = slots
            .get_mut(b.col_cluster)
            .and_then(|s| s.get_mut(b.row_cluster))
            .ok_or_else(|| Error::InvalidInput(format!("block ({}, {}) out of range", b.row_cluster, b.col_cluster)))?;
        let loadings = b.loadings.into_matrix()?;
        if loadings.nrows() != file.coeff_len {
            return Err(Error::InvalidInput("loadings row count differs from coeff_len".into()));
        }
        *slot = Some(BlockParams::new(loadings, DVector::from_vec(b.mean), b.covariance.into_matrix()?)?);
    }
    let blocks = slots
        .into_iter()
        .enumerate()
        .map(|(l, bs)| {
            bs.into_iter()
                .enumerate()
                .map(|(k, b)| b.ok_or_else(|| Error::InvalidInput(format!("missing block ({k}, {l})"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    ModelState::new(structure, file.rho, file.pi, blocks)
}
