//! Partition agreement and correlation statistics.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PartitionPair;

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

fn ari_generic<A: Hash + Eq + Copy, B: Hash + Eq + Copy>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("label vectors differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput("ARI needs at least two items".into()));
    }
    let mut joint: HashMap<(A, B), u64> = HashMap::new();
    let mut rows: HashMap<A, u64> = HashMap::new();
    let mut cols: HashMap<B, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    // sort before summing so the result does not depend on hash order
    let sum_sorted = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.into_iter().sum::<f64>()
    };
    let index = sum_sorted(joint.values().map(|&c| choose2(c)).collect());
    let sum_a = sum_sorted(rows.values().map(|&c| choose2(c)).collect());
    let sum_b = sum_sorted(cols.values().map(|&c| choose2(c)).collect());
    let total = choose2(a.len() as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // both partitions a single cluster, or both all singletons: identical
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Adjusted Rand index between two labelings of the same items.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    let (x, y) = if a <= b { (a, b) } else { (b, a) };
    ari_generic(x, y)
}

/// Row, column and block agreement between two co-clusterings, all defined on the cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionViews {
    pub row_ari: f64,
    pub col_ari: f64,
    pub block_ari: f64,
}

/// Compares an estimated co-clustering with the truth.
///
/// `col_ari` compares column labels. `block_ari` labels cell `(i, j)` by
/// `(w_j, z_i^{w_j})`. `row_ari` labels it by `(j, z_i^{w_j})`, so it scores
/// the row partition seen by each column and ignores how column clusters are
/// numbered.
pub fn partition_views(est: &PartitionPair, truth: &PartitionPair) -> Result<PartitionViews> {
    let (n, p) = (truth.n_rows(), truth.n_cols());
    if est.n_rows() != n || est.n_cols() != p {
        return Err(Error::InvalidInput(format!(
            "partitions cover {}x{} and {}x{} cells",
            est.n_rows(),
            est.n_cols(),
            n,
            p
        )));
    }
    let encode = |part: &PartitionPair, by_column: bool| -> Vec<(usize, usize)> {
        let mut v = Vec::with_capacity(n * p);
        for i in 0..n {
            for (j, &w) in part.col_labels.iter().enumerate() {
                v.push((if by_column { j } else { w }, part.row_labels[w][i]));
            }
        }
        v
    };
    let col_ari = ari(&est.col_labels, &truth.col_labels)?;
    if n * p < 2 {
        return Ok(PartitionViews {
            row_ari: 1.0,
            col_ari,
            block_ari: 1.0,
        });
    }
    Ok(PartitionViews {
        row_ari: ari_generic(&encode(est, true), &encode(truth, true))?,
        col_ari,
        block_ari: ari_generic(&encode(est, false), &encode(truth, false))?,
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput("pearson needs two equal-length samples of size >= 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidInput("pearson correlation undefined for a constant sample".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KendallTest {
    pub tau_b: f64,
    pub z: f64,
    /// Two-sided p-value from the normal approximation with tie correction.
    pub p_value: f64,
}

fn tie_groups(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut run = 1usize;
    for w in s.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            if run > 1 {
                groups.push(run as f64);
            }
            run = 1;
        }
    }
    if run > 1 {
        groups.push(run as f64);
    }
    groups
}

/// Kendall rank correlation test of independence.
pub fn kendall_test(x: &[f64], y: &[f64]) -> Result<KendallTest> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InvalidInput("kendall test needs two equal-length samples of size >= 3".into()));
    }
    let n = x.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let b = (y[i] - y[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            s += a * b;
        }
    }
    let nf = n as f64;
    let n0 = nf * (nf - 1.0) / 2.0;
    let tx = tie_groups(x);
    let ty = tie_groups(y);
    let n1: f64 = tx.iter().map(|t| t * (t - 1.0) / 2.0).sum();
    let n2: f64 = ty.iter().map(|t| t * (t - 1.0) / 2.0).sum();
    let denom = ((n0 - n1) * (n0 - n2)).sqrt();
    if denom == 0.0 {
        return Err(Error::InvalidInput("kendall tau undefined for a constant sample".into()));
    }
    let tau_b = s as f64 / denom;

    let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
    let vt: f64 = tx.iter().map(|t| t * (t - 1.0) * (2.0 * t + 5.0)).sum();
    let vu: f64 = ty.iter().map(|u| u * (u - 1.0) * (2.0 * u + 5.0)).sum();
    let t1: f64 = tx.iter().map(|t| t * (t - 1.0)).sum::<f64>() * ty.iter().map(|u| u * (u - 1.0)).sum::<f64>();
    let t2: f64 = tx.iter().map(|t| t * (t - 1.0) * (t - 2.0)).sum::<f64>() * ty.iter().map(|u| u * (u - 1.0) * (u - 2.0)).sum::<f64>();
    let var = (v0 - vt - vu) / 18.0 + t1 / (2.0 * nf * (nf - 1.0)) + t2 / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
    let z = s as f64 / var.sqrt();
    let p_value = statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok(KendallTest { tau_b, z, p_value })
}

/// Linear-interpolated quantile of a sample, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}
