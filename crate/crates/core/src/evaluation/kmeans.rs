//! k-means++ seeding followed by Lloyd iterations.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::interchange::{FeatureMap, LabelMap};
use crate::rng::{self, domain};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: LabelMap,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn cost(&self) -> f64 {
        self.cost_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its distance.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Clusters the patches of `features` into `k` groups. Stops at the first
/// iteration whose assignment equals the previous one, or after `iters`.
pub fn kmeans(features: &FeatureMap, k: usize, seed: u64, iters: usize) -> Result<KMeansResult> {
    let n = features.n_patches();
    if k == 0 || k > n {
        return Err(Error::contract(
            "kmeans",
            format!("k = {k} must be between 1 and the {n} patches"),
        ));
    }
    if k > u16::MAX as usize {
        return Err(Error::contract("kmeans", format!("k = {k} exceeds the label range")));
    }
    let points: Vec<Vec<f64>> = (0..n)
        .map(|p| features.row(p).iter().map(|&v| v as f64).collect())
        .collect();
    let mut rng = rng::stream(seed, domain::KMEANS, 0);
    let mut centroids = seed_plus_plus(&points, k, &mut rng);
    let mut assign: Vec<usize> = vec![usize::MAX; n];
    let mut cost_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut cost = 0.0;
        for (a, p) in assign.iter_mut().zip(&points) {
            let (c, d) = nearest(p, &centroids);
            changed |= *a != c;
            *a = c;
            cost += d;
        }
        cost_history.push(cost);
        if !changed {
            break;
        }
        let c = features.channels;
        let mut sums = vec![vec![0.0; c]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(&points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((cent, sum), &cnt) in centroids.iter_mut().zip(sums).zip(&counts) {
            // an empty cluster keeps its previous centroid
            if cnt > 0 {
                *cent = sum.into_iter().map(|s| s / cnt as f64).collect();
            }
        }
    }
    let labels = LabelMap::new(
        features.grid_h,
        features.grid_w,
        assign.iter().map(|&a| a as u16).collect(),
    )?;
    Ok(KMeansResult {
        labels,
        centroids,
        cost_history,
        iterations,
    })
}
