//! K-means over proportion vectors and the cluster-collapse degradation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ProportionVector;

const MAX_RESEEDS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDegradeSpec {
    pub k: usize,
    pub max_iters: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl ClusterDegradeSpec {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 300,
            tolerance: 1e-6,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            // guard against rounding landing on an existing centre
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd iterations from k-means++ seeding with the Euclidean metric. An
/// empty cluster takes the point farthest from its centroid; repeated
/// emptiness is an error.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, tolerance: f64, rng: &mut ChaCha8Rng) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("k = {k} for {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points of differing dimension".into()));
    }
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignment = vec![0; points.len()];
    let mut reseeds = 0;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        for (a, p) in assignment.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            reseeds += 1;
            if reseeds > MAX_RESEEDS {
                return Err(Error::Clustering(format!(
                    "cluster {empty} stayed empty after {MAX_RESEEDS} reseeds"
                )));
            }
            let (far, far_d) = points
                .iter()
                .enumerate()
                .map(|(i, p)| (i, sq_dist(p, &centroids[assignment[i]])))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if far_d <= 0.0 {
                return Err(Error::Clustering(format!(
                    "cluster {empty} is empty and every point sits on a centroid"
                )));
            }
            centroids[empty] = points[far].clone();
            continue;
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&new, &centroids[j]).sqrt());
            centroids[j] = new;
        }
        if shift < tolerance {
            break;
        }
    }
    for (a, p) in assignment.iter_mut().zip(points) {
        *a = nearest(p, &centroids).0;
    }
    let mut counts = vec![0usize; k];
    for &a in &assignment {
        counts[a] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Clustering(format!("cluster {empty} is empty after convergence")));
    }
    Ok(KMeans {
        centroids,
        assignment,
        iterations,
    })
}

/// Degraded proportions and each image's cluster index.
pub type ClusterDegradation = (BTreeMap<String, ProportionVector>, BTreeMap<String, usize>);

/// Clusters the proportion vectors, then gives every image of a cluster the
/// proportions of one member drawn uniformly at random.
pub fn degrade_sp_clustering(sp_set: &[(String, ProportionVector)], spec: &ClusterDegradeSpec) -> Result<ClusterDegradation> {
    if spec.k == 0 || spec.k > sp_set.len() {
        return Err(Error::invalid(format!("k = {} for {} images", spec.k, sp_set.len())));
    }
    if spec.k == sp_set.len() {
        // one image per cluster: the degradation is the identity even when
        // several images share the same proportions
        let degraded = sp_set.iter().map(|(id, sp)| (id.clone(), sp.clone())).collect();
        let clusters = sp_set.iter().enumerate().map(|(i, (id, _))| (id.clone(), i)).collect();
        return Ok((degraded, clusters));
    }
    let points: Vec<Vec<f64>> = sp_set.iter().map(|(_, sp)| sp.values().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let km = kmeans(&points, spec.k, spec.max_iters, spec.tolerance, &mut rng)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.k];
    for (i, &a) in km.assignment.iter().enumerate() {
        members[a].push(i);
    }
    let elected: Vec<usize> = members.iter().map(|m| m[rng.random_range(0..m.len())]).collect();
    let mut degraded = BTreeMap::new();
    let mut clusters = BTreeMap::new();
    for (i, (id, _)) in sp_set.iter().enumerate() {
        let c = km.assignment[i];
        degraded.insert(id.clone(), sp_set[elected[c]].1.clone());
        clusters.insert(id.clone(), c);
    }
    Ok((degraded, clusters))
}
