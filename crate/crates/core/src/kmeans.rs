//! Lloyd k-means with k-means++ seeding.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// `k` centroids of length `dim`, flattened.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the kept restart.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    centroids
        .chunks_exact(dim)
        .enumerate()
        .map(|(c, mu)| (c, sq_dist(point, mu)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points.chunks_exact(dim).map(|p| sq_dist(p, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&w| {
                    acc += w;
                    u < acc
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let c = &points[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(c);
        for (w, p) in d2.iter_mut().zip(points.chunks_exact(dim)) {
            *w = w.min(sq_dist(p, c));
        }
    }
    centroids
}

fn lloyd(points: &[f64], dim: usize, mut centroids: Vec<f64>, iterations: usize) -> KMeansResult {
    let k = centroids.len() / dim;
    let mut labels = vec![0; points.len() / dim];
    let mut history = Vec::new();
    for it in 0..iterations.max(1) {
        let mut inertia = 0.0;
        let mut changed = false;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let (c, d) = nearest(p, &centroids, dim);
            changed |= it == 0 || labels[i] != c;
            labels[i] = c;
            inertia += d;
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut sizes = vec![0usize; k];
        for (p, &c) in points.chunks_exact(dim).zip(&labels) {
            sizes[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            // an empty cluster keeps its previous centroid
            if sizes[c] > 0 {
                for q in 0..dim {
                    centroids[c * dim + q] = sums[c * dim + q] / sizes[c] as f64;
                }
            }
        }
    }
    let inertia = points
        .chunks_exact(dim)
        .zip(&labels)
        .map(|(p, &c)| sq_dist(p, &centroids[c * dim..(c + 1) * dim]))
        .sum();
    KMeansResult {
        labels,
        centroids,
        inertia,
        history,
    }
}

/// Clusters `points` (row-major, `dim` values each) into `k` groups, keeping
/// the restart with the lowest inertia.
pub fn kmeans(points: &[f64], dim: usize, k: usize, iterations: usize, restarts: usize, rng: &mut impl Rng) -> Result<KMeansResult> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::InvalidInput("point buffer does not divide into the dimension".into()));
    }
    let n = points.len() / dim;
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("cannot form {k} clusters from {n} points")));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let seeds = plus_plus(points, dim, k, rng);
        let res = lloyd(points, dim, seeds, iterations);
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}
