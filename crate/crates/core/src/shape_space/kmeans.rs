//! Seeded k-means with k-means++ initialization.

use nalgebra::DVector;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tolerance: f64,
    /// Re-seeding attempts when a cluster goes empty.
    pub max_attempts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 100,
            tolerance: 1e-9,
            max_attempts: 10,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<DVector<f64>>,
    pub iterations: usize,
    /// Seed actually used (differs from the configured one after re-seeding).
    pub seed_used: u64,
}

fn nearest(p: &DVector<f64>, centroids: &[DVector<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = (p - c).norm_squared();
        // Strict comparison: ties go to the lower index.
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Option<Vec<DVector<f64>>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let dist = WeightedIndex::new(&weights).ok()?;
        centroids.push(points[dist.sample(rng)].clone());
    }
    Some(centroids)
}

fn run_once(points: &[DVector<f64>], cfg: &KMeansConfig, seed: u64) -> Option<KMeansResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, cfg.k, &mut rng)?;
    let mut assignments = vec![0; points.len()];
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        iterations = it + 1;
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
        }
        let mut sums = vec![DVector::zeros(points[0].len()); cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (&a, p) in assignments.iter().zip(points) {
            sums[a] += p;
            counts[a] += 1;
        }
        if counts.contains(&0) {
            return None;
        }
        let mut moved = 0.0f64;
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            let next = s / n as f64;
            moved = moved.max((&next - &*c).norm());
            *c = next;
        }
        if moved < cfg.tolerance {
            break;
        }
    }
    // Final assignment against the settled centroids.
    for (a, p) in assignments.iter_mut().zip(points) {
        *a = nearest(p, &centroids).0;
    }
    let mut counts = vec![0usize; cfg.k];
    for &a in &assignments {
        counts[a] += 1;
    }
    if counts.contains(&0) {
        return None;
    }
    Some(KMeansResult {
        assignments,
        centroids,
        iterations,
        seed_used: seed,
    })
}

/// Partitions `points` into `cfg.k` non-empty clusters.
///
/// On an empty cluster the run is repeated with seeds `seed + 1, seed + 2, …`
/// up to `max_attempts` times in total.
pub fn kmeans(points: &[DVector<f64>], cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k == 0 || points.len() < cfg.k {
        return Err(Error::InvalidInput(format!(
            "k-means needs at least k={} points, got {}",
            cfg.k,
            points.len()
        )));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: p.len(),
        });
    }
    for attempt in 0..cfg.max_attempts.max(1) {
        let seed = cfg.seed.wrapping_add(attempt as u64);
        if let Some(r) = run_once(points, cfg, seed) {
            return Ok(r);
        }
    }
    Err(Error::EmptyCluster {
        attempts: cfg.max_attempts.max(1),
    })
}
