//! Per-label k-means over example embeddings.
//!
//! Initialization is k-means++ driven by [`SeededRng`]:
//! the first center is `points[below(n)]`; each further center is drawn with
//! probability proportional to the squared distance to the nearest chosen
//! center, by taking the first index whose running sum of weights exceeds
//! `next_f64() * total`. If every weight is zero, the center is drawn
//! uniformly from the indices not yet chosen.
//!
//! Lloyd iterations assign each point to the nearest centroid (ties to the
//! lower centroid index), repair empty clusters, record the objective, then
//! move centroids to their members' mean. Iteration stops once the largest
//! centroid shift falls below `tol` or after `max_iter` updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::store::{EmbeddingStore, Split};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("k-means needs at least one point")]
    EmptyInput,
    #[error("k = {k} exceeds the number of points ({points})")]
    KTooLarge { k: usize, points: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("label `{label}` has {found} train examples, fewer than k = {needed}")]
    InsufficientExamples {
        label: String,
        needed: usize,
        found: usize,
    },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("points have inconsistent dimensions")]
    RaggedInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances of points to their assigned centroid.
    pub objective: f64,
    /// Objective recorded after every assignment step.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding. Returns `k` centers copied from `points`.
pub fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.below(n);
    chosen[first] = true;
    let mut centers = vec![points[first].clone()];
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| {
                nearest
                    .iter()
                    .rposition(|&w| w > 0.0)
                    .expect("positive total has a positive weight")
            })
        } else {
            let remaining = n - centers.len();
            let nth = rng.below(remaining);
            (0..n).filter(|&i| !chosen[i]).nth(nth).expect("k <= n")
        };
        chosen[pick] = true;
        centers.push(points[pick].clone());
        let c = centers.last().expect("just pushed");
        for (w, p) in nearest.iter_mut().zip(points) {
            let d = squared_distance(p, c);
            if d < *w {
                *w = d;
            }
        }
    }
    centers
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = squared_distance(p, &centroids[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let d = squared_distance(p, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Gives each empty cluster the point farthest from its centroid among
/// clusters that would stay non-empty (ties to the lower point index); that
/// point becomes the empty cluster's centroid.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let owner = assignments[i];
            if sizes[owner] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[owner]);
            if far.is_none_or(|(_, fd)| d > fd) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("k <= n leaves a cluster with two members");
        sizes[assignments[i]] -= 1;
        sizes[empty] = 1;
        assignments[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        for x in s.iter_mut() {
            *x /= c as f64;
        }
    }
    sums
}

/// Lloyd iterations from the given initial centroids.
pub fn lloyd(points: &[Vec<f64>], init: Vec<Vec<f64>>, max_iter: usize, tol: f64) -> KMeansResult {
    let k = init.len();
    let dim = points[0].len();
    let mut centroids = init;
    let mut assignments = assign(points, &centroids);
    repair_empty(points, &mut centroids, &mut assignments);
    let mut trace = vec![objective(points, &centroids, &assignments)];
    let mut iterations = 0;
    while iterations < max_iter {
        let updated = means(points, &assignments, k, dim);
        let shift = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        assignments = assign(points, &centroids);
        repair_empty(points, &mut centroids, &mut assignments);
        trace.push(objective(points, &centroids, &assignments));
        iterations += 1;
        if shift < tol {
            break;
        }
    }
    KMeansResult {
        objective: *trace.last().expect("trace is non-empty"),
        centroids,
        assignments,
        trace,
        iterations,
    }
}

/// Seeded k-means++ followed by Lloyd iterations.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult, ClusterError> {
    if points.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k > points.len() {
        return Err(ClusterError::KTooLarge {
            k,
            points: points.len(),
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(ClusterError::RaggedInput);
    }
    let mut rng = SeededRng::new(seed);
    let init = kmeans_plus_plus(points, k, &mut rng);
    Ok(lloyd(points, init, max_iter, tol))
}

/// One cluster of a label's train examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: String,
    pub label: String,
    /// Unit-length centroid.
    pub centroid: Vec<f64>,
    /// Members ascending by Euclidean distance to `centroid`, ties by id.
    pub member_ids: Vec<String>,
    /// Within-cluster sum of squared distances to the k-means centroid.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub seed: u64,
    pub k_per_label: BTreeMap<String, usize>,
    pub clusters: Vec<Cluster>,
    /// Final k-means objective per label.
    #[serde(default)]
    pub objective: BTreeMap<String, f64>,
}

/// Restricts a nearest-centroid query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope<'a> {
    Label(&'a str),
    Global,
}

pub fn cluster_id(label: &str, ordinal: usize) -> String {
    format!("{label}:{ordinal}")
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

/// Clusters the train-split records carrying `label`.
pub fn cluster_label(
    store: &EmbeddingStore,
    label: &str,
    k: usize,
    seed: u64,
) -> Result<Vec<Cluster>, ClusterError> {
    cluster_label_with(store, label, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)
}

pub fn cluster_label_with(
    store: &EmbeddingStore,
    label: &str,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<Vec<Cluster>, ClusterError> {
    let members: Vec<_> = store
        .records()
        .iter()
        .filter(|r| r.split == Split::Train && r.has_label(label))
        .collect();
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if members.len() < k {
        return Err(ClusterError::InsufficientExamples {
            label: label.to_string(),
            needed: k,
            found: members.len(),
        });
    }
    let points: Vec<Vec<f64>> = members
        .iter()
        .map(|r| r.vector.iter().map(|&x| f64::from(x)).collect())
        .collect();
    let result = kmeans(&points, k, seed, max_iter, tol)?;
    let mut clusters = Vec::with_capacity(k);
    for (j, raw) in result.centroids.iter().enumerate() {
        let idx: Vec<usize> = (0..points.len())
            .filter(|&i| result.assignments[i] == j)
            .collect();
        let centroid = unit(raw).unwrap_or_else(|| {
            // antipodal members cancel out; fall back to the member closest to the mean
            let &closest = idx
                .iter()
                .min_by(|&&a, &&b| {
                    squared_distance(&points[a], raw).total_cmp(&squared_distance(&points[b], raw))
                })
                .expect("clusters are non-empty");
            points[closest].clone()
        });
        let objective = idx.iter().map(|&i| squared_distance(&points[i], raw)).sum();
        let mut ranked: Vec<(f64, &str)> = idx
            .iter()
            .map(|&i| {
                (
                    squared_distance(&points[i], &centroid).sqrt(),
                    members[i].id.as_str(),
                )
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        clusters.push(Cluster {
            cluster_id: cluster_id(label, j),
            label: label.to_string(),
            centroid,
            member_ids: ranked.into_iter().map(|(_, id)| id.to_string()).collect(),
            objective,
        });
    }
    Ok(clusters)
}

impl ClusterSet {
    /// Clusters every label in `k_per_label` with the same seed.
    pub fn build(
        store: &EmbeddingStore,
        k_per_label: &BTreeMap<String, usize>,
        seed: u64,
    ) -> Result<Self, ClusterError> {
        let mut clusters = Vec::new();
        let mut objective = BTreeMap::new();
        for (label, &k) in k_per_label {
            let found = cluster_label(store, label, k, seed)?;
            objective.insert(label.clone(), found.iter().map(|c| c.objective).sum());
            clusters.extend(found);
        }
        Ok(Self {
            seed,
            k_per_label: k_per_label.clone(),
            clusters,
            objective,
        })
    }

    pub fn get(&self, cluster_id: &str) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.cluster_id == cluster_id)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.k_per_label.keys().map(String::as_str)
    }

    /// Cluster in scope whose centroid is most cosine-similar to `query`,
    /// ties by ascending cluster id.
    pub fn nearest_centroid(
        &self,
        query: &[f64],
        scope: Scope<'_>,
    ) -> Result<&Cluster, ClusterError> {
        if let Scope::Label(l) = scope {
            if !self.k_per_label.contains_key(l) {
                return Err(ClusterError::UnknownLabel(l.to_string()));
            }
        }
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut best: Option<(f64, &Cluster)> = None;
        for c in &self.clusters {
            if let Scope::Label(l) = scope {
                if c.label != l {
                    continue;
                }
            }
            let cn = c.centroid.iter().map(|x| x * x).sum::<f64>().sqrt();
            let sim = query
                .iter()
                .zip(&c.centroid)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / (qn * cn);
            let better = match best {
                None => true,
                Some((bs, bc)) => sim > bs || (sim == bs && c.cluster_id < bc.cluster_id),
            };
            if better {
                best = Some((sim, c));
            }
        }
        best.map(|(_, c)| c).ok_or(match scope {
            Scope::Label(l) => ClusterError::UnknownLabel(l.to_string()),
            Scope::Global => ClusterError::EmptyInput,
        })
    }
}
