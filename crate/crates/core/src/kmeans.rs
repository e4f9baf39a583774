//! Seeded k-means with k-means++ initialization and Lloyd refinement.
//!
//! Distances are squared Euclidean. On unit-norm embeddings this orders points
//! exactly like cosine similarity, while keeping the mean update valid.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use crate::rng;

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once every centroid moved less than this (Euclidean).
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    /// Inertia after each assignment step, in order.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64) -> Result<ClusterModel> {
    kmeans_with(points, k, seed, KMeansParams::default())
}

pub fn kmeans_with(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    params: KMeansParams,
) -> Result<ClusterModel> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::Clustering("empty input".into()));
    }
    if k == 0 {
        return Err(Error::Clustering("k must be positive".into()));
    }
    if k > n {
        return Err(Error::Clustering(format!("k = {k} exceeds {n} points")));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("k-means input"));
    }
    let rows: Vec<Vec<f64>> = points.outer_iter().map(|r| r.to_vec()).collect();
    let mut rng = rng::stream(seed, "kmeans");
    let mut centroids = plus_plus_init(&rows, k, &mut rng);

    let mut assignments = vec![0usize; n];
    let mut dists = vec![0f64; n];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0;

    let mut inertia = assign(&rows, &centroids, &mut assignments, &mut dists);
    inertia_trace.push(inertia);
    while iterations < params.max_iter {
        iterations += 1;
        let mut updated = recompute_centroids(&rows, &centroids, &assignments, k);
        repair_empty(&rows, &mut updated, &mut assignments, &dists, k);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        let next = assign(&rows, &centroids, &mut assignments, &mut dists);
        debug_assert!(
            next <= inertia + 1e-9 * inertia.max(1.0),
            "k-means inertia increased: {inertia} -> {next}"
        );
        inertia = next;
        inertia_trace.push(inertia);
        if shift < params.tol {
            break;
        }
    }

    let d = points.ncols();
    let flat: Vec<f64> = centroids.into_iter().flatten().collect();
    Ok(ClusterModel {
        k,
        centroids: Array2::from_shape_vec((k, d), flat).expect("centroid shape"),
        assignments,
        inertia,
        inertia_trace,
        iterations,
    })
}

fn plus_plus_init(rows: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![rows[first].clone()];
    let mut nearest: Vec<f64> = rows.iter().map(|r| squared_distance(r, &rows[first])).collect();

    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in nearest.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                acc += w;
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final sum.
            pick.unwrap_or_else(|| nearest.iter().rposition(|w| *w > 0.0).unwrap())
        } else {
            // Only duplicates of existing centroids remain.
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[pick] = true;
        for (i, r) in rows.iter().enumerate() {
            let d = squared_distance(r, &rows[pick]);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
        centroids.push(rows[pick].clone());
    }
    centroids
}

/// Assigns every row to its nearest centroid (lowest index on ties) and
/// returns the inertia, summed in row order.
fn assign(
    rows: &[Vec<f64>],
    centroids: &[Vec<f64>],
    assignments: &mut [usize],
    dists: &mut [f64],
) -> f64 {
    let mut inertia = 0.0;
    for (i, r) in rows.iter().enumerate() {
        let mut best = 0;
        let mut best_d = squared_distance(r, &centroids[0]);
        for (j, c) in centroids.iter().enumerate().skip(1) {
            let d = squared_distance(r, c);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        assignments[i] = best;
        dists[i] = best_d;
        inertia += best_d;
    }
    inertia
}

fn recompute_centroids(
    rows: &[Vec<f64>],
    previous: &[Vec<f64>],
    assignments: &[usize],
    k: usize,
) -> Vec<Vec<f64>> {
    let d = rows[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (r, &a) in rows.iter().zip(assignments) {
        counts[a] += 1;
        sums[a].iter_mut().zip(r).for_each(|(s, x)| *s += x);
    }
    sums.into_iter()
        .zip(&counts)
        .zip(previous)
        .map(|((s, &c), prev)| {
            if c == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|x| x / c as f64).collect()
            }
        })
        .collect()
}

/// Reseeds each empty cluster with the point farthest from its assigned
/// centroid. The following assignment step restores nearest-centroid order.
fn repair_empty(
    rows: &[Vec<f64>],
    centroids: &mut [Vec<f64>],
    assignments: &mut [usize],
    dists: &[f64],
    k: usize,
) {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let mut taken = vec![false; rows.len()];
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..rows.len())
            .filter(|&i| !taken[i] && counts[assignments[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            });
        if let Some(i) = far {
            taken[i] = true;
            counts[assignments[i]] -= 1;
            counts[c] += 1;
            assignments[i] = c;
            centroids[c] = rows[i].clone();
        }
    }
}
