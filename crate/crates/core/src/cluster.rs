//! Per-scene k-means overclustering and the cluster statistics that pick
//! the marker clusters for pseudo-labelling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::scenedata::{derive_seed, Raster, Scene};
use crate::spectral::IndexMaps;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub dim: usize,
    /// Cluster id per point, in input order.
    pub labels: Vec<u32>,
    /// `[k, dim]` row-major.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// Inertia after every assignment step, starting with the seeding.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point, lowest id on ties.
fn assign(points: &[f64], dim: usize, centroids: &[f64], labels: &mut [u32], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let mut best = (f64::INFINITY, 0u32);
        for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
            let d = sq_dist(p, centroid);
            if d < best.0 {
                best = (d, c as u32);
            }
        }
        labels[i] = best.1;
        dists[i] = best.0;
        inertia += best.0;
    }
    inertia
}

/// Lloyd's algorithm with k-means++ seeding on `n x dim` row-major points.
///
/// Points are processed in lexicographic order internally, so the result
/// does not depend on the input order. Clusters left empty by an update are
/// re-seeded at the point farthest from its centroid.
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<ClusterAssignment> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(config_err!("point buffer is not a multiple of dimension {dim}"));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(config_err!("k-means needs 1 <= k <= n, got k = {k}, n = {n}"));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(config_err!("k-means input contains non-finite values"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&points[a * dim..(a + 1) * dim], &points[b * dim..(b + 1) * dim]);
        pa.iter().zip(pb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted: Vec<f64> = order.iter().flat_map(|&i| points[i * dim..(i + 1) * dim].iter().copied()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(&sorted, dim, k, &mut rng);
    let mut labels = vec![0u32; n];
    let mut dists = vec![0.0; n];
    let mut inertia = assign(&sorted, dim, &centroids, &mut labels, &mut dists);
    let mut history = vec![inertia];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let next = update(&sorted, dim, k, &labels, &dists, &centroids);
        let movement = centroids
            .chunks_exact(dim)
            .zip(next.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        inertia = assign(&sorted, dim, &centroids, &mut labels, &mut dists);
        history.push(inertia);
        if movement < tol {
            break;
        }
    }
    let mut out_labels = vec![0u32; n];
    for (pos, &orig) in order.iter().enumerate() {
        out_labels[orig] = labels[pos];
    }
    Ok(ClusterAssignment { k, dim, labels: out_labels, centroids, inertia, inertia_history: history, iterations })
}

fn plus_plus_init(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points.chunks_exact(dim).map(|p| sq_dist(p, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            // every point already coincides with a centre
            rng.random_range(0..n)
        };
        let c = points[pick * dim..(pick + 1) * dim].to_vec();
        for (d, p) in d2.iter_mut().zip(points.chunks_exact(dim)) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn update(points: &[f64], dim: usize, k: usize, labels: &[u32], dists: &[f64], old: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.chunks_exact(dim).zip(labels) {
        let l = l as usize;
        counts[l] += 1;
        for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut taken = vec![false; labels.len()];
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for s in &mut sums[c * dim..(c + 1) * dim] {
                *s *= inv;
            }
        } else {
            let far = (0..labels.len()).filter(|&i| !taken[i]).max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            match far {
                Some(i) => {
                    taken[i] = true;
                    sums[c * dim..(c + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
                }
                None => sums[c * dim..(c + 1) * dim].copy_from_slice(&old[c * dim..(c + 1) * dim]),
            }
        }
    }
    sums
}

/// Per-pixel feature vectors of a raster, standardised per channel.
pub fn standardized_features(raster: &Raster) -> Vec<f64> {
    let n = raster.pixels();
    let c = raster.channels;
    let mut out = vec![0.0; n * c];
    for ch in 0..c {
        let plane = raster.plane(ch);
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        for (p, &v) in plane.iter().enumerate() {
            out[p * c + ch] = (v as f64 - mean) * inv;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterStat {
    pub mean_ndvi: f64,
    pub mean_ndwi: f64,
    pub mean_bi: f64,
    pub mean_bs: f64,
    pub pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub clusters: Vec<ClusterStat>,
}

/// Mean index values per cluster. Empty clusters get NaN means.
pub fn cluster_stats(labels: &[u32], k: usize, idx: &IndexMaps) -> Result<ClusterStats> {
    if labels.len() != idx.ndvi.len() {
        return Err(config_err!("cluster labels and index maps differ in size"));
    }
    let mut sums = vec![[0.0f64; 4]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= k {
            return Err(config_err!("cluster id {l} out of range for k = {k}"));
        }
        counts[l] += 1;
        let s = &mut sums[l];
        s[0] += idx.ndvi[p] as f64;
        s[1] += idx.ndwi[p] as f64;
        s[2] += idx.bi[p] as f64;
        s[3] += idx.bs[p] as f64;
    }
    let clusters = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| {
            let m = |v: f64| if n > 0 { v / n as f64 } else { f64::NAN };
            ClusterStat { mean_ndvi: m(s[0]), mean_ndwi: m(s[1]), mean_bi: m(s[2]), mean_bs: m(s[3]), pixel_count: n }
        })
        .collect();
    Ok(ClusterStats { clusters })
}

/// Extreme and medium clusters used as class markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerClusters {
    pub h_ndvi: u32,
    pub h_ndwi: u32,
    pub h_bi: u32,
    pub m_ndvi: u32,
    pub m_bi: u32,
    pub h_bs: u32,
    pub l_bs: u32,
}

/// Non-empty cluster ids sorted ascending by `key`, lower id first on ties.
fn ascending(stats: &ClusterStats, key: impl Fn(&ClusterStat) -> f64) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..stats.clusters.len() as u32).filter(|&c| stats.clusters[c as usize].pixel_count > 0).collect();
    ids.sort_by(|&a, &b| {
        let (x, y) = (key(&stats.clusters[a as usize]), key(&stats.clusters[b as usize]));
        x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    ids
}

fn argmax(stats: &ClusterStats, key: impl Fn(&ClusterStat) -> f64) -> u32 {
    let mut best: Option<(f64, u32)> = None;
    for (c, s) in stats.clusters.iter().enumerate() {
        if s.pixel_count == 0 {
            continue;
        }
        let v = key(s);
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, c as u32));
        }
    }
    best.expect("at least one non-empty cluster").1
}

/// Maximal, minimal and medium-rank clusters. The medium cluster sits at
/// ascending rank `floor(k / 2)` among non-empty clusters.
pub fn select_markers(stats_s2: &ClusterStats, stats_s1: &ClusterStats) -> Result<MarkerClusters> {
    let non_empty = |s: &ClusterStats| s.clusters.iter().filter(|c| c.pixel_count > 0).count();
    if non_empty(stats_s2) < 3 {
        return Err(config_err!("optical clustering needs at least 3 non-empty clusters"));
    }
    if non_empty(stats_s1) < 2 {
        return Err(config_err!("SAR clustering needs at least 2 non-empty clusters"));
    }
    let medium = |key: fn(&ClusterStat) -> f64| {
        let ids = ascending(stats_s2, key);
        ids[ids.len() / 2]
    };
    let by_bs = ascending(stats_s1, |s| s.mean_bs);
    Ok(MarkerClusters {
        h_ndvi: argmax(stats_s2, |s| s.mean_ndvi),
        h_ndwi: argmax(stats_s2, |s| s.mean_ndwi),
        h_bi: argmax(stats_s2, |s| s.mean_bi),
        m_ndvi: medium(|s| s.mean_ndvi),
        m_bi: medium(|s| s.mean_bi),
        h_bs: argmax(stats_s1, |s| s.mean_bs),
        l_bs: by_bs[0],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k_s2: usize,
    pub k_s1: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub kmeans_seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k_s2: 8, k_s1: 4, kmeans_max_iters: 100, kmeans_tol: 1e-4, kmeans_seed: 0 }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_s2 < 3 || self.k_s1 < 2 {
            return Err(config_err!("need k_s2 >= 3 and k_s1 >= 2"));
        }
        if self.kmeans_tol < 0.0 || !self.kmeans_tol.is_finite() {
            return Err(config_err!("kmeans_tol must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Clustering of one scene in both modalities with its statistics.
#[derive(Debug, Clone)]
pub struct SceneClusters {
    pub s2: ClusterAssignment,
    pub s1: ClusterAssignment,
    pub stats_s2: ClusterStats,
    pub stats_s1: ClusterStats,
    pub markers: MarkerClusters,
}

pub fn cluster_scene(scene: &Scene, idx: &IndexMaps, cfg: &ClusterConfig) -> Result<SceneClusters> {
    cfg.validate()?;
    let opt = standardized_features(&scene.optical);
    let s2 = kmeans(&opt, scene.optical.channels, cfg.k_s2, cfg.kmeans_seed, cfg.kmeans_max_iters, cfg.kmeans_tol)?;
    let sar = standardized_features(&scene.sar);
    let s1 = kmeans(&sar, 2, cfg.k_s1, derive_seed(cfg.kmeans_seed, 1), cfg.kmeans_max_iters, cfg.kmeans_tol)?;
    let stats_s2 = cluster_stats(&s2.labels, cfg.k_s2, idx)?;
    let stats_s1 = cluster_stats(&s1.labels, cfg.k_s1, idx)?;
    let markers = select_markers(&stats_s2, &stats_s1)?;
    Ok(SceneClusters { s2, s1, stats_s2, stats_s1, markers })
}
