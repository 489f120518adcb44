//! Per-cluster configuration cache: the serving fast path.
//!
//! High-frequency query regions are summarized by k-means centroids over
//! query embeddings; each centroid stores the configuration the sampler
//! chose for the cluster's medoid query. A probe that lands close enough to
//! a centroid (cosine similarity at or above the hit threshold) skips
//! sampling entirely. The cache is immutable at serving time — rebuilds are
//! explicit offline actions — so the serving path stays deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::config_space::{Configuration, FeasibleSpaceSpec};
use crate::error::{Error, Result};

pub const CACHE_FORMAT_VERSION: u32 = 1;

/// One cluster: its centroid in embedding space and the configuration
/// deployed for queries that hit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub centroid: Vec<f64>,
    pub config: Configuration,
}

/// The full fast-path cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigCache {
    pub version: u32,
    /// Cosine-similarity hit threshold; probes below it miss.
    pub hit_threshold: f64,
    pub entries: Vec<CacheEntry>,
}

/// Diagnostics from a cache build.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheBuildReport {
    pub requested_clusters: usize,
    pub built_clusters: usize,
    /// Set when the query set was smaller than the requested cluster count.
    pub reduced: bool,
    pub kmeans_iterations: u32,
    pub assignments: Vec<usize>,
    pub medoids: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded Lloyd iterations: returns `(centroids, assignments, iterations)`.
/// Empty clusters are reseeded with the point farthest from its centroid.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    max_iters: u32,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<usize>, u32) {
    assert!(k >= 1 && k <= points.len());
    let dim = points[0].len();
    // Initial centroids: k distinct points chosen by a seeded partial
    // shuffle.
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..points.len()).collect();
    for i in 0..k {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    let mut centroids: Vec<Vec<f64>> = order[..k].iter().map(|&i| points[i].clone()).collect();
    let mut assignments = vec![0usize; points.len()];
    let mut iterations = 0;
    for iter in 0..max_iters {
        iterations = iter + 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        if !changed && iter > 0 {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignments[i]] += 1;
            for (s, v) in sums[assignments[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed with the globally worst-fitting point.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[assignments[a]]);
                        let db = sq_dist(&points[b], &centroids[assignments[b]]);
                        da.partial_cmp(&db).expect("finite distances")
                    })
                    .expect("nonempty points");
                centroids[c] = points[far].clone();
            } else {
                for (slot, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *slot = s / counts[c] as f64;
                }
            }
        }
    }
    (centroids, assignments, iterations)
}

/// Index of the member minimizing total squared distance to the others.
pub fn medoid(points: &[Vec<f64>], members: &[usize]) -> usize {
    assert!(!members.is_empty());
    let mut best = members[0];
    let mut best_cost = f64::INFINITY;
    for &i in members {
        let cost: f64 = members.iter().map(|&j| sq_dist(&points[i], &points[j])).sum();
        if cost < best_cost {
            best_cost = cost;
            best = i;
        }
    }
    best
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot / (na * nb)
}

impl ConfigCache {
    pub fn empty(hit_threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&hit_threshold) {
            return Err(Error::Parameter("hit threshold must lie in [0, 1]".into()));
        }
        Ok(ConfigCache { version: CACHE_FORMAT_VERSION, hit_threshold, entries: Vec::new() })
    }

    /// Cluster the embedding set, pick each cluster's medoid, and ask the
    /// supplied optimizer for that medoid's configuration. Requesting more
    /// clusters than there are queries reduces the cluster count.
    pub fn build(
        embeddings: &[Vec<f64>],
        n_clusters: usize,
        hit_threshold: f64,
        seed: u64,
        optimizer: &mut dyn FnMut(usize) -> Result<Configuration>,
    ) -> Result<(Self, CacheBuildReport)> {
        if n_clusters == 0 {
            return Err(Error::Parameter("cluster count must be at least 1".into()));
        }
        let mut cache = ConfigCache::empty(hit_threshold)?;
        if embeddings.is_empty() {
            return Ok((
                cache,
                CacheBuildReport {
                    requested_clusters: n_clusters,
                    built_clusters: 0,
                    reduced: true,
                    kmeans_iterations: 0,
                    assignments: Vec::new(),
                    medoids: Vec::new(),
                },
            ));
        }
        let k = n_clusters.min(embeddings.len());
        let (centroids, assignments, iterations) = kmeans(embeddings, k, 50, seed);
        let mut medoids = Vec::with_capacity(k);
        for c in 0..k {
            let members: Vec<usize> =
                (0..embeddings.len()).filter(|&i| assignments[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let m = medoid(embeddings, &members);
            medoids.push(m);
            cache.entries.push(CacheEntry {
                centroid: centroids[c].clone(),
                config: optimizer(m)?,
            });
        }
        let built = cache.entries.len();
        Ok((
            cache,
            CacheBuildReport {
                requested_clusters: n_clusters,
                built_clusters: built,
                reduced: built < n_clusters,
                kmeans_iterations: iterations,
                assignments,
                medoids,
            },
        ))
    }

    /// Nearest-centroid lookup: a hit iff the best cosine similarity reaches
    /// the threshold. Linear in the number of entries.
    pub fn probe(&self, u: &[f64]) -> Option<(usize, &Configuration)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, entry) in self.entries.iter().enumerate() {
            let sim = cosine(u, &entry.centroid);
            if best.map_or(true, |(_, b)| sim > b) {
                best = Some((i, sim));
            }
        }
        match best {
            Some((i, sim)) if sim >= self.hit_threshold => Some((i, &self.entries[i].config)),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize cache: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Load and validate: version must match and every cached configuration
    /// must be feasible in the given space.
    pub fn load(path: &Path, space: &FeasibleSpaceSpec) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|_| Error::ModelMissing(path.to_path_buf()))?;
        let cache: ConfigCache = serde_json::from_str(&text)
            .map_err(|e| Error::ModelFormat { path: path.to_path_buf(), message: e.to_string() })?;
        if cache.version != CACHE_FORMAT_VERSION {
            return Err(Error::ModelFormat {
                path: path.to_path_buf(),
                message: format!(
                    "cache format version {} (expected {})",
                    cache.version, CACHE_FORMAT_VERSION
                ),
            });
        }
        if !(0.0..=1.0).contains(&cache.hit_threshold) {
            return Err(Error::ModelFormat {
                path: path.to_path_buf(),
                message: "hit threshold outside [0, 1]".into(),
            });
        }
        for entry in &cache.entries {
            if !space.validate(&entry.config)? {
                return Err(Error::ModelFormat {
                    path: path.to_path_buf(),
                    message: format!("cached configuration {:?} is infeasible", entry.config.values),
                });
            }
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIM: usize = 256;

    /// Three well-separated Gaussian blobs in embedding space.
    fn planted_blobs(per_cluster: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, 0.05).unwrap();
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for cluster in 0..3usize {
            for _ in 0..per_cluster {
                let mut p = vec![0.0; DIM];
                // Cluster centers along distinct coordinate axes.
                p[cluster * 3] = 1.0;
                for v in p.iter_mut() {
                    *v += rng.sample::<f64, _>(normal);
                }
                points.push(p);
                labels.push(cluster);
            }
        }
        (points, labels)
    }

    fn config_for(i: usize) -> Configuration {
        Configuration::new(vec![100 + i as i64, 128, 8])
    }

    #[test]
    fn kmeans_recovers_planted_clusters() {
        let (points, labels) = planted_blobs(20, 1);
        let (_, assignments, iters) = kmeans(&points, 3, 50, 7);
        assert!(iters <= 50);
        let mut agree = 0usize;
        let mut total = 0usize;
        for a in 0..points.len() {
            for b in a + 1..points.len() {
                let same_truth = labels[a] == labels[b];
                let same_mined = assignments[a] == assignments[b];
                if same_truth == same_mined {
                    agree += 1;
                }
                total += 1;
            }
        }
        let rand_index = agree as f64 / total as f64;
        assert!(rand_index > 0.95, "rand index {rand_index}");
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let (points, _) = planted_blobs(15, 2);
        let a = kmeans(&points, 3, 50, 11);
        let b = kmeans(&points, 3, 50, 11);
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn single_cluster_build_uses_the_global_medoid() {
        let (points, _) = planted_blobs(10, 3);
        let all: Vec<usize> = (0..points.len()).collect();
        let expected_medoid = medoid(&points, &all);
        let mut asked = Vec::new();
        let (cache, report) = ConfigCache::build(&points, 1, 0.9, 5, &mut |m| {
            asked.push(m);
            Ok(config_for(m))
        })
        .unwrap();
        assert_eq!(cache.entries.len(), 1);
        assert_eq!(report.built_clusters, 1);
        assert_eq!(asked, vec![expected_medoid]);
        assert_eq!(cache.entries[0].config, config_for(expected_medoid));
    }

    #[test]
    fn empty_build_yields_a_cache_where_every_probe_misses() {
        let (cache, report) =
            ConfigCache::build(&[], 8, 0.9, 5, &mut |m| Ok(config_for(m))).unwrap();
        assert!(cache.entries.is_empty());
        assert!(report.reduced);
        assert!(cache.probe(&vec![1.0; DIM]).is_none());
    }

    #[test]
    fn fewer_queries_than_clusters_reduces_the_count() {
        let (points, _) = planted_blobs(2, 4); // 6 points
        let (cache, report) =
            ConfigCache::build(&points, 64, 0.9, 5, &mut |m| Ok(config_for(m))).unwrap();
        assert_eq!(report.requested_clusters, 64);
        assert!(report.reduced);
        assert_eq!(cache.entries.len(), report.built_clusters);
        assert!(report.built_clusters <= 6);
    }

    #[test]
    fn probe_hit_and_miss_semantics() {
        let (points, _) = planted_blobs(10, 6);
        let (cache, _) =
            ConfigCache::build(&points, 3, 0.9, 5, &mut |m| Ok(config_for(m))).unwrap();
        // A probe equal to a centroid has cosine 1 with it.
        let (idx, config) = cache.probe(&cache.entries[1].centroid.clone()).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(*config, cache.entries[1].config);
        // Orthogonal to every centroid: the blobs live on axes 0, 3, 6.
        let mut ortho = vec![0.0; DIM];
        ortho[100] = 1.0;
        assert!(cache.probe(&ortho).is_none());
        // Threshold 0 turns every probe into a nearest-centroid hit.
        let mut open = cache.clone();
        open.hit_threshold = 0.0;
        assert!(open.probe(&ortho).is_some());
    }

    #[test]
    fn cache_round_trips_and_rejects_infeasible_entries() {
        let space = FeasibleSpaceSpec::default_space();
        let (points, _) = planted_blobs(5, 8);
        let (cache, _) =
            ConfigCache::build(&points, 2, 0.9, 5, &mut |m| Ok(config_for(m))).unwrap();
        let dir = std::env::temp_dir().join(format!("cache-rt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cache.json");
        cache.save(&path).unwrap();
        let back = ConfigCache::load(&path, &space).unwrap();
        assert_eq!(cache, back);

        let mut poisoned = cache.clone();
        poisoned.entries[0].config = Configuration::new(vec![0, 7, 5]);
        poisoned.save(&path).unwrap();
        assert!(ConfigCache::load(&path, &space).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn thresholds_outside_unit_interval_are_rejected() {
        assert!(ConfigCache::empty(1.5).is_err());
        assert!(ConfigCache::empty(-0.1).is_err());
        assert!(ConfigCache::empty(0.0).is_ok());
        assert!(ConfigCache::empty(1.0).is_ok());
    }
}
