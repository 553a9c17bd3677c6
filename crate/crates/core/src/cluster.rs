//! K-means++ seeding followed by Lloyd iterations, used to group users by
//! their CF embeddings for group-level refining.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cf::CfModel;
use crate::hashing::rng_for;

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClusterError {
    #[error("cluster count must be positive")]
    ZeroClusters,
    #[error("cannot form {k} clusters from {n} points")]
    TooFewPoints { k: usize, n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster SSE after each Lloyd update.
    pub sse_trajectory: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn sse(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

/// D²-weighted seeding.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // rounding can walk past the last positive weight
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
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

/// Runs K-means++ on `points` until the assignment reaches a fixpoint or
/// `max_iters` Lloyd iterations have run.
pub fn kmeans_pp(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if k > points.len() {
        return Err(ClusterError::TooFewPoints { k, n: points.len() });
    }
    let dim = points[0].len();
    let mut rng = rng_for(seed, &["kmeans++"]);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut trajectory = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        iterations += 1;
        repair_empty(points, &mut assignments, &centroids, k);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let value = sse(points, &assignments, &centroids);
        if let Some(&prev) = trajectory.last() {
            debug_assert!(value <= prev * (1.0 + 1e-12) + 1e-12, "Lloyd SSE increased: {prev} -> {value}");
        }
        trajectory.push(value);
    }

    Ok(KMeansFit {
        assignments,
        centroids,
        sse_trajectory: trajectory,
        iterations,
        converged,
    })
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignments.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let donor = points
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[assignments[*i]] > 1)
            .map(|(i, p)| (i, sq_dist(p, &centroids[assignments[i]])))
            .filter(|(_, d)| *d > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match donor {
            Some((i, _)) => assignments[i] = empty,
            None => return,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserClustering {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sse_trajectory: Vec<f64>,
}

impl UserClustering {
    pub fn cluster_of(&self, user_id: &str) -> Option<usize> {
        self.assignments.get(user_id).copied()
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = &str> {
        self.assignments
            .iter()
            .filter(move |(_, &c)| c == cluster)
            .map(|(u, _)| u.as_str())
    }
}

/// Clusters every user of `model` on its user embedding.
pub fn cluster_users(model: &CfModel, k: usize, seed: u64) -> Result<UserClustering, ClusterError> {
    let points: Vec<Vec<f64>> = model
        .user_ids()
        .iter()
        .map(|u| model.user_embedding(u).expect("own user").to_vec())
        .collect();
    let fit = kmeans_pp(&points, k, seed, DEFAULT_MAX_ITERS)?;
    Ok(UserClustering {
        k,
        seed,
        assignments: model.user_ids().iter().cloned().zip(fit.assignments).collect(),
        centroids: fit.centroids,
        sse_trajectory: fit.sse_trajectory,
    })
}
