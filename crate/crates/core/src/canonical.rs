//! Canonical pose selection: embed pose images, cluster them with seeded
//! k-means, and keep the medoid member of every cluster.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::PoseImage;

/// Default number of canonical poses.
pub const DEFAULT_K: usize = 8;

/// Pose-image embedder settings. The default downsamples to 16×8,
/// averages channels to grayscale and L2-normalizes (128 dimensions).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    /// `[height, width]` of the downsampled grid.
    pub grid: [usize; 2],
    pub normalize: bool,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            grid: [16, 8],
            normalize: true,
        }
    }
}

impl EmbedderConfig {
    pub fn dim(&self) -> usize {
        self.grid[0] * self.grid[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEmbedding(pub Vec<f64>);

impl PoseEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Bilinear sample of a single plane at fractional source coordinates.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Embeds a pose image. Background (−1) maps to 0, so an empty pose embeds
/// to the zero vector, which is returned unnormalized.
pub fn embed_pose(pose: &PoseImage, cfg: &EmbedderConfig) -> PoseEmbedding {
    let (h, w) = pose.dims();
    let gray: Vec<f64> = pose
        .pixels()
        .map(|p| p.iter().map(|&v| (v as f64 + 1.0) / 2.0).sum::<f64>() / 3.0)
        .collect();
    let [gh, gw] = cfg.grid;
    let (sy, sx) = (h as f64 / gh as f64, w as f64 / gw as f64);
    let mut v = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let y = (i as f64 + 0.5) * sy - 0.5;
            let x = (j as f64 + 0.5) * sx - 0.5;
            v.push(bilinear(&gray, h, w, y, x));
        }
    }
    if cfg.normalize {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
    }
    PoseEmbedding(v)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of a k-means fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, starting from the initial centres.
    pub inertia_history: Vec<f64>,
    pub medoid_indices: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl PoseClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn count_distinct(points: &[&[f64]]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

/// Index-ordered k-means++ seeding.
pub fn kmeans_plus_plus(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just above the final partial sum
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Nearest centre per point (ties → lowest centre index) and total inertia.
fn assign(points: &[&[f64]], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn means(points: &[&[f64]], assignments: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

fn validate_points(points: &[&[f64]], k: usize) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::Clustering("cannot cluster an empty point set".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("all points must share one dimension".into()));
    }
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(Error::Clustering(format!(
            "insufficient distinct points: {distinct} distinct for k = {k}"
        )));
    }
    Ok(dim)
}

/// Seeded k-means: k-means++ initialization then Lloyd iterations until the
/// assignment stops changing or `max_iter` updates have run.
pub fn kmeans_fit(points: &[&[f64]], k: usize, seed: u64, max_iter: usize) -> Result<PoseClusterModel> {
    validate_points(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_plus_plus(points, k, &mut rng);
    kmeans_from(points, init, max_iter)
}

/// Lloyd iterations from explicit initial centres.
///
/// A cluster that empties is reseeded at the point farthest from its
/// assigned centre.
pub fn kmeans_from(points: &[&[f64]], initial: Vec<Vec<f64>>, max_iter: usize) -> Result<PoseClusterModel> {
    let k = initial.len();
    let dim = validate_points(points, k)?;
    if initial.iter().any(|c| c.len() != dim) {
        return Err(Error::Shape("initial centres must match the point dimension".into()));
    }
    let (mut assignments, mut dists) = assign(points, &initial);
    let mut centroids = initial;
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let (mut next, counts) = means(points, &assignments, k, dim);
        for c in 0..k {
            if counts[c] == 0 {
                let far = dists
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best })
                    .0;
                next[c] = points[far].to_vec();
                dists[far] = 0.0;
            }
        }
        centroids = next;
        let (new_assignments, new_dists) = assign(points, &centroids);
        history.push(new_dists.iter().sum());
        dists = new_dists;
        if new_assignments == assignments {
            converged = true;
            break;
        }
        assignments = new_assignments;
    }
    if !converged {
        // keep the centroid-is-mean invariant for the returned assignment
        centroids = means(points, &assignments, k, dim).0;
        dists = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .collect();
    }
    let inertia = dists.iter().sum();
    let medoid_indices = (0..k)
        .map(|c| {
            let mut best: Option<(usize, f64)> = None;
            for (i, (&a, &d)) in assignments.iter().zip(&dists).enumerate() {
                if a == c && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            best.map_or(usize::MAX, |(i, _)| i)
        })
        .collect();
    Ok(PoseClusterModel {
        k,
        centroids,
        assignments,
        inertia,
        inertia_history: history,
        medoid_indices,
        iterations,
        converged,
    })
}

/// The K representative pose images used for normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalPoseSet {
    pub poses: Vec<PoseImage>,
    pub source_sample_ids: Vec<String>,
    pub model: PoseClusterModel,
}

impl CanonicalPoseSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Embeds every pose, fits k-means and returns each cluster's medoid pose.
pub fn select_canonical_poses(
    dataset: &[(PoseImage, String)],
    k: usize,
    seed: u64,
    embedder: &EmbedderConfig,
    max_iter: usize,
) -> Result<(CanonicalPoseSet, Vec<PoseEmbedding>)> {
    if dataset.is_empty() {
        return Err(Error::Clustering("no poses to cluster".into()));
    }
    let embeddings: Vec<PoseEmbedding> = dataset.iter().map(|(p, _)| embed_pose(p, embedder)).collect();
    let refs: Vec<&[f64]> = embeddings.iter().map(|e| e.as_slice()).collect();
    let model = kmeans_fit(&refs, k, seed, max_iter)?;
    let poses = model.medoid_indices.iter().map(|&i| dataset[i].0.clone()).collect();
    let source_sample_ids = model.medoid_indices.iter().map(|&i| dataset[i].1.clone()).collect();
    Ok((
        CanonicalPoseSet {
            poses,
            source_sample_ids,
            model,
        },
        embeddings,
    ))
}

/// Projects points onto their top two principal axes (power iteration with
/// deflation on the covariance matrix).
pub fn principal_axes_2d(points: &[&[f64]]) -> Vec<[f64; 2]> {
    if points.is_empty() {
        return Vec::new();
    }
    let dim = points[0].len();
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; dim * dim];
    for p in &centered {
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += p[i] * p[j] / n;
            }
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for a in 0..2 {
        let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + (i + a) as f64 * 1e-3).collect();
        for _ in 0..500 {
            let mut next: Vec<f64> = (0..dim)
                .map(|i| (0..dim).map(|j| cov[i * dim + j] * v[j]).sum())
                .collect();
            for ax in &axes {
                let dot: f64 = next.iter().zip(ax).map(|(x, y)| x * y).sum();
                next.iter_mut().zip(ax).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            // no variance left in this direction: leave a zero axis
            if norm <= 1e-12 * trace {
                next.iter_mut().for_each(|x| *x = 0.0);
                v = next;
                break;
            }
            next.iter_mut().for_each(|x| *x /= norm);
            v = next;
        }
        axes.push(v);
    }
    centered
        .iter()
        .map(|p| {
            let proj = |ax: &Vec<f64>| p.iter().zip(ax).map(|(x, y)| x * y).sum::<f64>();
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect()
}
