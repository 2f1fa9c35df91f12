//! K-Means with k-means++ seeding and Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    /// Requested `k` when it had to be reduced to the number of points.
    pub reduced_from: Option<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.iter().rposition(|d| *d > 0.0).unwrap();
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Clusters `points` into `k` groups. `k` is reduced to `points.len()` when
/// it exceeds it.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeansResult> {
    if points.is_empty() || k == 0 {
        return Err(Error::Invalid(format!(
            "k-means needs at least one point and k >= 1 (got {} points, k = {k})",
            points.len()
        )));
    }
    if points.iter().any(|p| p.len() != points[0].len()) {
        return Err(Error::Invalid("k-means points differ in dimension".into()));
    }
    let reduced_from = (k > points.len()).then_some(k);
    if let Some(req) = reduced_from {
        log::warn!(
            "k-means: requested {req} clusters but only {} points; using {}",
            points.len(),
            points.len()
        );
    }
    let k = k.min(points.len());
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);

    let mut assignments = vec![0usize; points.len()];
    let mut dists = vec![0.0f64; points.len()];
    let mut inertia_history = Vec::new();
    let mut iterations = 0;
    loop {
        let assigned: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        for (i, (a, d)) in assigned.into_iter().enumerate() {
            assignments[i] = a;
            dists[i] = d;
        }
        inertia_history.push(dists.iter().sum());
        if iterations >= max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            let next = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect::<Vec<_>>()
            } else {
                // re-seed from the point farthest from its own centroid
                let far = (0..points.len())
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                dists[far] = 0.0;
                points[far].clone()
            };
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < tol {
            let assigned: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
            for (i, (a, d)) in assigned.into_iter().enumerate() {
                assignments[i] = a;
                dists[i] = d;
            }
            inertia_history.push(dists.iter().sum());
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        inertia: *inertia_history.last().unwrap(),
        inertia_history,
        iterations,
        reduced_from,
    })
}
