//! k-means clustering and agreement scores against ground-truth labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::tensor::norm;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One Lloyd run from a k-means++ seeding; returns assignments and inertia.
fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng, max_iters: usize) -> (Vec<usize>, f64) {
    let n = points.len();
    let d = points[0].len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut closest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = closest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &c) in closest.iter().enumerate() {
                if target < c {
                    pick = i;
                    break;
                }
                target -= c;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (c, p) in closest.iter_mut().zip(points) {
            *c = c.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let dist = sq_dist(p, c);
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    let inertia = assign.iter().zip(points).map(|(&a, p)| sq_dist(p, &centers[a])).sum();
    (assign, inertia)
}

/// Best-inertia assignment over `restarts` seeded k-means runs on the
/// L2-normalized rows.
pub fn kmeans(set: &FeatureSet, num_clusters: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    if num_clusters < 2 {
        return Err(Error::config("eval.num_clusters", "must be >= 2"));
    }
    if set.len() < num_clusters {
        return Err(Error::DimensionMismatch {
            expected: num_clusters,
            got: set.len(),
        });
    }
    let points: Vec<Vec<f64>> = set
        .features
        .iter_rows()
        .map(|r| {
            let n = norm(r);
            if n == 0.0 {
                r.to_vec()
            } else {
                r.iter().map(|v| v / n).collect()
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let (assign, inertia) = lloyd(&points, num_clusters, &mut rng, 100);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((assign, inertia));
        }
    }
    Ok(best.expect("at least one restart").0)
}

struct Contingency {
    table: Vec<Vec<f64>>,
    rows: Vec<f64>,
    cols: Vec<f64>,
    n: f64,
}

fn contingency(a: &[usize], b: &[usize]) -> Contingency {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Contingency {
        table,
        rows,
        cols,
        n: a.len() as f64,
    }
}

fn pairs(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index; 1 when both partitions agree up to relabelling.
pub fn ari(labels: &[usize], clusters: &[usize]) -> f64 {
    let c = contingency(labels, clusters);
    let index: f64 = c.table.iter().flatten().map(|&x| pairs(x)).sum();
    let sum_rows: f64 = c.rows.iter().map(|&x| pairs(x)).sum();
    let sum_cols: f64 = c.cols.iter().map(|&x| pairs(x)).sum();
    let expected = sum_rows * sum_cols / pairs(c.n).max(f64::MIN_POSITIVE);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        // both partitions trivial (all one cluster or all singletons)
        return 1.0;
    }
    (index - expected) / (max_index - expected)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / n) * (c / n).ln())
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two entropies.
pub fn nmi(labels: &[usize], clusters: &[usize]) -> f64 {
    let c = contingency(labels, clusters);
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            if x > 0.0 {
                mi += (x / c.n) * (c.n * x / (c.rows[i] * c.cols[j])).ln();
            }
        }
    }
    let h = 0.5 * (entropy(&c.rows, c.n) + entropy(&c.cols, c.n));
    if h <= 0.0 {
        return 1.0;
    }
    (mi / h).clamp(0.0, 1.0)
}

/// k-means on the features, scored against their labels.
pub fn ari_nmi(set: &FeatureSet, num_clusters: usize, seed: u64) -> Result<(f64, f64)> {
    let clusters = kmeans(set, num_clusters, 10, seed)?;
    Ok((ari(&set.labels, &clusters), nmi(&set.labels, &clusters)))
}
