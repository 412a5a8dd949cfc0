//! Starting partitions for SEM-Gibbs chains.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::SemGibbsConfig;
use crate::kmeans::{kmeans, nearest};
use crate::model::{counts, CoClusterStructure, PartitionPair};
use crate::rng::{substream, Phase};
use crate::signal::CoefficientGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Uniform labels.
    RandomPartition,
    /// Random seed items per cluster, the rest assigned to the nearest seed mean.
    SampleBlocks,
    /// k-means on column means, then on per-cluster row profiles.
    KMeans,
    /// Shared-row block model fit, its row partition copied to every column cluster.
    FunLbmSeed,
}

impl std::str::FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" | "random_partition" => Ok(Self::RandomPartition),
            "sample" | "sample_blocks" => Ok(Self::SampleBlocks),
            "kmeans" | "k_means" => Ok(Self::KMeans),
            "funlbm" | "funlbm_seed" => Ok(Self::FunLbmSeed),
            other => Err(Error::InvalidInput(format!("unknown initialization {other:?}"))),
        }
    }
}

impl InitKind {
    pub const ALL: [InitKind; 4] = [Self::RandomPartition, Self::SampleBlocks, Self::KMeans, Self::FunLbmSeed];

    pub fn name(self) -> &'static str {
        match self {
            Self::RandomPartition => "random",
            Self::SampleBlocks => "sample",
            Self::KMeans => "kmeans",
            Self::FunLbmSeed => "funlbm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitStrategy {
    pub kind: InitKind,
    pub kmeans_iterations: usize,
    pub kmeans_restarts: usize,
}

impl Default for InitStrategy {
    fn default() -> Self {
        Self::new(InitKind::RandomPartition)
    }
}

impl InitStrategy {
    pub fn new(kind: InitKind) -> Self {
        Self {
            kind,
            kmeans_iterations: 20,
            kmeans_restarts: 5,
        }
    }

    /// Builds a starting partition. `config` drives the inner fit of the
    /// block-model seed and is ignored by the other strategies.
    pub fn initialize(
        &self,
        grid: &CoefficientGrid,
        structure: &CoClusterStructure,
        config: &SemGibbsConfig,
        seed: u64,
    ) -> Result<PartitionPair> {
        let (n, p) = (grid.n_rows(), grid.n_cols());
        if p < structure.col_clusters() || n < structure.max_row_clusters() {
            return Err(Error::InvalidStructure(format!("{structure} does not fit a {n} x {p} grid")));
        }
        match self.kind {
            InitKind::RandomPartition => Ok(random_partition(structure, n, p, seed)),
            InitKind::SampleBlocks => Ok(profile_partition(grid, structure, seed, |pts, dim, k, rng| {
                sample_seed_labels(pts, dim, k, rng)
            })),
            InitKind::KMeans => {
                let (iters, restarts) = (self.kmeans_iterations, self.kmeans_restarts);
                Ok(profile_partition(grid, structure, seed, |pts, dim, k, rng| {
                    kmeans(pts, dim, k, iters, restarts, rng).expect("k checked against point count").labels
                }))
            }
            InitKind::FunLbmSeed => funlbm_seed(grid, structure, config, seed),
        }
    }
}

/// Moves single items from the largest cluster into each empty one; ties
/// between equally large donors are broken at random.
fn fill_empty(labels: &mut [usize], k: usize, rng: &mut impl Rng) {
    let mut sizes = counts(labels, k);
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let max = *sizes.iter().max().expect("k > 0");
        let donors: Vec<usize> = (0..k).filter(|&d| sizes[d] == max).collect();
        let donor = donors[rng.random_range(0..donors.len())];
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == donor).collect();
        let moved = members[rng.random_range(0..members.len())];
        labels[moved] = c;
        sizes[donor] -= 1;
        sizes[c] += 1;
    }
}

fn uniform_labels(len: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
    fill_empty(&mut labels, k, rng);
    labels
}

pub fn random_partition(structure: &CoClusterStructure, n: usize, p: usize, seed: u64) -> PartitionPair {
    let col_labels = uniform_labels(p, structure.col_clusters(), &mut substream(seed, 0, Phase::InitColumns, 0));
    let row_labels = structure
        .row_clusters()
        .iter()
        .enumerate()
        .map(|(l, &k)| uniform_labels(n, k, &mut substream(seed, 0, Phase::InitRows, l as u64)))
        .collect();
    PartitionPair { col_labels, row_labels }
}

/// Picks `max(2, ceil(N / (5 k)))` random seed items per cluster (fewer when
/// points run short) and assigns every other point to the nearest seed mean.
fn sample_seed_labels(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = points.len() / dim;
    let per = 2usize.max(n.div_ceil(5 * k)).min(n / k).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let mut centroids = vec![0.0; k * dim];
    for c in 0..k {
        for &idx in &order[c * per..(c + 1) * per] {
            for q in 0..dim {
                centroids[c * dim + q] += points[idx * dim + q] / per as f64;
            }
        }
    }
    let mut labels: Vec<usize> = points.chunks_exact(dim).map(|pt| nearest(pt, &centroids, dim).0).collect();
    for c in 0..k {
        for &idx in &order[c * per..(c + 1) * per] {
            labels[idx] = c;
        }
    }
    labels
}

/// Clusters columns by their mean over rows, then for each column cluster
/// clusters rows by the concatenation of their cells in that cluster.
fn profile_partition<F>(grid: &CoefficientGrid, structure: &CoClusterStructure, seed: u64, cluster: F) -> PartitionPair
where
    F: Fn(&[f64], usize, usize, &mut rand_chacha::ChaCha8Rng) -> Vec<usize>,
{
    let (n, p, m) = (grid.n_rows(), grid.n_cols(), grid.dim());
    let mut col_points = vec![0.0; p * m];
    for j in 0..p {
        for i in 0..n {
            for (acc, x) in col_points[j * m..(j + 1) * m].iter_mut().zip(grid.cell(i, j)) {
                *acc += x / n as f64;
            }
        }
    }
    let l_count = structure.col_clusters();
    let mut col_rng = substream(seed, 0, Phase::InitColumns, 0);
    let mut col_labels = cluster(&col_points, m, l_count, &mut col_rng);
    fill_empty(&mut col_labels, l_count, &mut col_rng);

    let row_labels = (0..l_count)
        .map(|l| {
            let cols: Vec<usize> = (0..p).filter(|&j| col_labels[j] == l).collect();
            let dim = cols.len() * m;
            let mut pts = Vec::with_capacity(n * dim);
            for i in 0..n {
                for &j in &cols {
                    pts.extend_from_slice(grid.cell(i, j));
                }
            }
            let k = structure.row_clusters()[l];
            let mut rng = substream(seed, 0, Phase::InitRows, l as u64);
            let mut labels = cluster(&pts, dim, k, &mut rng);
            fill_empty(&mut labels, k, &mut rng);
            labels
        })
        .collect();
    PartitionPair { col_labels, row_labels }
}

/// Fits the shared-row model with `K = max K_l` and maps each column
/// cluster's surplus row labels to the nearest retained row-cluster mean.
fn funlbm_seed(grid: &CoefficientGrid, structure: &CoClusterStructure, config: &SemGibbsConfig, seed: u64) -> Result<PartitionPair> {
    let l_count = structure.col_clusters();
    let k_max = structure.max_row_clusters();
    let lbm = crate::selection::funlbm_fit(grid, k_max, l_count, &config.with_seed(seed), 1)?;
    let shared = &lbm.best_partition;
    let (n, m) = (grid.n_rows(), grid.dim());
    let mut row_labels = Vec::with_capacity(l_count);
    for l in 0..l_count {
        let k_l = structure.row_clusters()[l];
        let mut labels = shared.row_labels[0].clone();
        if k_l < k_max {
            let cols: Vec<usize> = (0..grid.n_cols()).filter(|&j| shared.col_labels[j] == l).collect();
            let dim = cols.len() * m;
            let profile = |i: usize| -> Vec<f64> { cols.iter().flat_map(|&j| grid.cell(i, j).iter().copied()).collect() };
            let mut centroids = vec![0.0; k_l * dim];
            let sizes = counts(&labels, k_max);
            for i in 0..n {
                let k = labels[i];
                if k < k_l {
                    for (c, x) in centroids[k * dim..(k + 1) * dim].iter_mut().zip(profile(i)) {
                        *c += x / sizes[k] as f64;
                    }
                }
            }
            let retained: Vec<bool> = (0..k_l).map(|k| sizes[k] > 0).collect();
            for i in 0..n {
                if labels[i] >= k_l {
                    let pt = profile(i);
                    labels[i] = (0..k_l)
                        .filter(|&k| retained[k])
                        .map(|k| {
                            let d: f64 = centroids[k * dim..(k + 1) * dim].iter().zip(&pt).map(|(a, b)| (a - b) * (a - b)).sum();
                            (k, d)
                        })
                        .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
                        .0;
                }
            }
            fill_empty(&mut labels, k_l, &mut substream(seed, 0, Phase::InitRows, l as u64));
        }
        row_labels.push(labels);
    }
    Ok(PartitionPair {
        col_labels: shared.col_labels.clone(),
        row_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::random_grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check(partition: &PartitionPair, structure: &CoClusterStructure, n: usize, p: usize) {
        partition.validate(structure, n, p).unwrap();
        assert!(partition.col_counts(structure).iter().all(|&c| c > 0));
        for l in 0..structure.col_clusters() {
            assert!(partition.row_counts(structure, l).iter().all(|&c| c > 0));
        }
    }

    #[test]
    fn every_strategy_yields_a_valid_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let grid = random_grid(12, 9, 4, &mut rng);
        let structure = CoClusterStructure::new(vec![3, 2, 1]).unwrap();
        let config = SemGibbsConfig {
            max_iterations: 5,
            burn_in: 1,
            ..Default::default()
        };
        for kind in InitKind::ALL {
            let init = InitStrategy::new(kind);
            let a = init.initialize(&grid, &structure, &config, 9).unwrap();
            check(&a, &structure, 12, 9);
            let b = init.initialize(&grid, &structure, &config, 9).unwrap();
            assert_eq!(a, b, "{kind:?} not reproducible");
        }
    }

    #[test]
    fn random_partition_fills_every_cluster_even_when_tight() {
        let structure = CoClusterStructure::new(vec![5, 5]).unwrap();
        for seed in 0..50 {
            check(&random_partition(&structure, 5, 2, seed), &structure, 5, 2);
        }
    }

    #[test]
    fn profile_strategies_recover_separated_columns() {
        // columns 0..3 near +5, columns 3..6 near -5; rows alternate sign within each
        let m = 3;
        let (n, p) = (8, 6);
        let mut data = Vec::new();
        for i in 0..n {
            for j in 0..p {
                let base = if j < 3 { 5.0 } else { -5.0 };
                let row = if i % 2 == 0 { 1.0 } else { -1.0 };
                for q in 0..m {
                    data.push(base + row + 0.01 * q as f64);
                }
            }
        }
        let grid = CoefficientGrid::new(
            (0..n).map(|i| i.to_string()).collect(),
            (0..p).map(|j| j.to_string()).collect(),
            crate::signal::CommonFrequencyGrid::new(0.1, m).unwrap(),
            data,
            Vec::new(),
        )
        .unwrap();
        let structure = CoClusterStructure::new(vec![2, 2]).unwrap();
        let part = InitStrategy::new(InitKind::KMeans)
            .initialize(&grid, &structure, &SemGibbsConfig::default(), 1)
            .unwrap();
        assert!(part.col_labels[..3].iter().all(|&w| w == part.col_labels[0]));
        assert!(part.col_labels[3..].iter().all(|&w| w == part.col_labels[3]));
        assert_ne!(part.col_labels[0], part.col_labels[3]);
        for rows in &part.row_labels {
            for i in 0..n {
                assert_eq!(rows[i] == rows[0], i % 2 == 0);
            }
        }
    }

    #[test]
    fn parses_names() {
        for kind in InitKind::ALL {
            assert_eq!(kind.name().parse::<InitKind>().unwrap(), kind);
        }
        assert!("bogus".parse::<InitKind>().is_err());
    }
}
