use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Codebook;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KMeansInit {
    /// Seeded sample of k distinct descriptors.
    Sample,
    /// Distance-weighted (k-means++) seeding with greedy local trials.
    PlusPlus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub init: KMeansInit,
    pub max_iter: usize,
    /// Independent restarts; the lowest final objective wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            init: KMeansInit::Sample,
            max_iter: 100,
            restarts: 1,
        }
    }
}

/// Build a k-means codebook.
pub fn build_codebook(
    descriptors: &[Vec<f32>],
    k: usize,
    seed: u64,
    config: &KMeansConfig,
) -> Result<Codebook> {
    build_codebook_traced(descriptors, k, seed, config).map(|(cb, _)| cb)
}

/// As [`build_codebook`], also returning the objective (within-cluster sum of
/// squares) after every assignment step of the winning restart.
pub fn build_codebook_traced(
    descriptors: &[Vec<f32>],
    k: usize,
    seed: u64,
    config: &KMeansConfig,
) -> Result<(Codebook, Vec<f64>)> {
    if descriptors.is_empty() {
        return Err(Error::EmptyInput("no descriptors to cluster"));
    }
    if k == 0 {
        return Err(Error::ConfigInvalid("k must be at least 1".into()));
    }
    let dim = descriptors[0].len();
    if let Some(bad) = descriptors.iter().find(|d| d.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let points: Vec<Vec<f64>> = descriptors
        .iter()
        .map(|d| d.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let distinct = distinct_indices(descriptors);
    if k > distinct.len() {
        return Err(Error::DegenerateK {
            k,
            distinct: distinct.len(),
        });
    }

    let mut best: Option<(f64, Vec<Vec<f64>>, Vec<f64>)> = None;
    for restart in 0..config.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        let init = match config.init {
            KMeansInit::Sample => init_sample(&points, &distinct, k, &mut rng),
            KMeansInit::PlusPlus => init_plus_plus(&points, &distinct, k, &mut rng),
        };
        let (centroids, trace) = lloyd(&points, init, config.max_iter);
        let last = *trace.last().expect("lloyd records at least one step");
        if best.as_ref().is_none_or(|(obj, _, _)| last < *obj) {
            best = Some((last, centroids, trace));
        }
    }
    let (_, centroids, trace) = best.expect("at least one restart");
    let centroids = centroids
        .into_iter()
        .map(|c| c.into_iter().map(|v| v as f32).collect())
        .collect();
    Ok((Codebook { centroids, seed }, trace))
}

/// Indices of the first occurrence of every distinct descriptor.
fn distinct_indices(descriptors: &[Vec<f32>]) -> Vec<usize> {
    let mut keyed: Vec<(Vec<u32>, usize)> = descriptors
        .iter()
        .enumerate()
        .map(|(i, d)| (d.iter().map(|v| v.to_bits()).collect(), i))
        .collect();
    keyed.sort();
    keyed.dedup_by(|a, b| a.0 == b.0);
    let mut idx: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    idx.sort_unstable();
    idx
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn init_sample(
    points: &[Vec<f64>],
    distinct: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    rand::seq::index::sample(rng, distinct.len(), k)
        .into_iter()
        .map(|i| points[distinct[i]].clone())
        .collect()
}

fn init_plus_plus(
    points: &[Vec<f64>],
    distinct: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = distinct[rng.gen_range(0..distinct.len())];
    let mut centers = vec![points[first].clone()];
    let mut closest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = closest.iter().sum();
        if total <= 0.0 {
            // Every point coincides with a center; fall back to unused distinct points.
            let next = distinct
                .iter()
                .find(|&&i| centers.iter().all(|c| sq_dist(c, &points[i]) > 0.0))
                .copied()
                .expect("k <= distinct count");
            centers.push(points[next].clone());
            continue;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = points.len() - 1;
            for (i, d) in closest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            if closest[pick] <= 0.0 {
                pick = closest
                    .iter()
                    .rposition(|d| *d > 0.0)
                    .expect("total > 0");
            }
            let updated: Vec<f64> = points
                .par_iter()
                .zip(&closest)
                .map(|(p, &c)| c.min(sq_dist(p, &points[pick])))
                .collect();
            let pot: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|(b, _, _)| pot < *b) {
                best = Some((pot, pick, updated));
            }
        }
        let (_, pick, updated) = best.expect("at least one trial");
        centers.push(points[pick].clone());
        closest = updated;
    }
    centers
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let pairs: Vec<(usize, f64)> = points
        .par_iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            (best, best_d)
        })
        .collect();
    let objective = pairs.iter().map(|(_, d)| d).sum();
    (pairs.into_iter().map(|(i, _)| i).collect(), objective)
}

fn lloyd(
    points: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    max_iter: usize,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let dim = points[0].len();
    let mut trace = Vec::new();
    let mut prev: Option<Vec<usize>> = None;
    for _ in 0..max_iter.max(1) {
        let (labels, objective) = assign(points, &centroids);
        trace.push(objective);
        if prev.as_ref() == Some(&labels) {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            // Empty clusters keep their centroid.
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
        prev = Some(labels);
    }
    (centroids, trace)
}
