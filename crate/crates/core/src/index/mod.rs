//! Online similarity retrieval over cached centroids.

mod hnsw;

pub use hnsw::{HnswIndex, HnswParams, IndexStats, LevelPolicy, LevelStats, SearchOutcome};

use serde::{Deserialize, Serialize};

use crate::cluster::Centroid;
use crate::error::Result;
use crate::vector::{check_dims, dot, Embedding};

/// Level of the node ranked `rank` (0 = largest cluster_size) among `total`
/// nodes. Level `l` holds `round(total * M^-l)` nodes, so the profile
/// matches standard HNSW while the most-referenced centroids live highest.
pub fn assign_level(rank: usize, total: usize, m: usize) -> usize {
    debug_assert!(rank < total.max(1));
    let m = m.max(2) as f64;
    let capacity = |level: usize| (total as f64 * m.powi(-(level as i32))).round() as usize;
    let mut level = 0;
    while rank < capacity(level + 1) {
        level += 1;
    }
    level
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Hit,
    Miss,
}

/// Where a cache hit was served from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HitSource {
    Centroid,
    Overflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheLookupResult {
    pub outcome: Outcome,
    pub centroid_id: Option<u64>,
    pub similarity: Option<f64>,
    pub output: Option<String>,
    pub source: Option<HitSource>,
    pub distance_computations: u64,
}

impl CacheLookupResult {
    pub fn miss(distance_computations: u64) -> Self {
        CacheLookupResult {
            outcome: Outcome::Miss,
            centroid_id: None,
            similarity: None,
            output: None,
            source: None,
            distance_computations,
        }
    }

    pub fn is_hit(&self) -> bool {
        self.outcome == Outcome::Hit
    }
}

/// Exact scan: argmax cosine over `centroids`, ties to the lowest id; a hit
/// iff that maximum clears `theta_r`.
pub fn brute_force_search(centroids: &[Centroid], query: &Embedding, theta_r: f64) -> Result<CacheLookupResult> {
    let mut best: Option<(f64, &Centroid)> = None;
    for c in centroids {
        check_dims(c.vector.dim(), query.dim())?;
        let s = dot(c.vector.as_slice(), query.as_slice());
        best = match best {
            Some((bs, bc)) if bs > s || (bs == s && bc.id < c.id) => Some((bs, bc)),
            _ => Some((s, c)),
        };
    }
    let n = centroids.len() as u64;
    Ok(match best {
        Some((s, c)) if s >= theta_r => CacheLookupResult {
            outcome: Outcome::Hit,
            centroid_id: Some(c.id),
            similarity: Some(s),
            output: Some(c.output.clone()),
            source: Some(HitSource::Centroid),
            distance_computations: n,
        },
        _ => CacheLookupResult::miss(n),
    })
}

/// Power-of-two histogram of per-lookup distance computations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    /// `buckets[k]` counts lookups with `2^k - 1 <= n < 2^(k+1) - 1`.
    pub buckets: Vec<u64>,
    pub lookups: u64,
    pub total: u64,
}

impl DistanceHistogram {
    pub fn record(&mut self, n: u64) {
        let k = (64 - (n + 1).leading_zeros() - 1) as usize;
        if self.buckets.len() <= k {
            self.buckets.resize(k + 1, 0);
        }
        self.buckets[k] += 1;
        self.lookups += 1;
        self.total += n;
    }

    pub fn mean(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.total as f64 / self.lookups as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::normalize;

    #[test]
    fn quota_levels() {
        assert_eq!(assign_level(0, 4096, 16), 3);
        assert_eq!(assign_level(1, 4096, 16), 2);
        assert_eq!(assign_level(15, 4096, 16), 2);
        assert_eq!(assign_level(16, 4096, 16), 1);
        assert_eq!(assign_level(255, 4096, 16), 1);
        assert_eq!(assign_level(256, 4096, 16), 0);
        assert_eq!(assign_level(4095, 4096, 16), 0);
        assert_eq!(assign_level(0, 1, 16), 0);
    }

    #[test]
    fn quota_levels_are_monotone_in_rank() {
        for total in [1usize, 2, 7, 100, 1000, 5000] {
            let mut prev = usize::MAX;
            for r in 0..total {
                let l = assign_level(r, total, 16);
                assert!(l <= prev);
                prev = l;
            }
        }
    }

    fn c(id: u64, v: &[f32]) -> Centroid {
        Centroid::new(id, normalize(&Embedding::new(v.to_vec()).unwrap()).unwrap(), format!("o{id}"), 1.0)
    }

    #[test]
    fn brute_force_ties_and_threshold() {
        let cs = vec![c(5, &[1.0, 1.0]), c(2, &[1.0, -1.0])];
        let q = Embedding::new(vec![1.0, 0.0]).unwrap();
        let r = brute_force_search(&cs, &q, 0.5).unwrap();
        assert_eq!(r.centroid_id, Some(2));
        assert!(r.is_hit());
        let r = brute_force_search(&cs, &q, 0.9).unwrap();
        assert!(!r.is_hit());
        let far = Embedding::new(vec![-1.0, 0.0]).unwrap();
        assert!(brute_force_search(&cs, &far, 0.0).unwrap().centroid_id.is_none());
        let ortho = Embedding::new(vec![0.0, 1.0]).unwrap();
        assert!(brute_force_search(&cs[..1], &ortho, 0.0).unwrap().is_hit());
        assert!(!brute_force_search(&[], &q, 0.0).unwrap().is_hit());
    }

    #[test]
    fn histogram_buckets() {
        let mut h = DistanceHistogram::default();
        for n in [0, 1, 2, 3, 6, 7, 100] {
            h.record(n);
        }
        assert_eq!(h.buckets, vec![1, 2, 2, 1, 0, 0, 1]);
        assert_eq!(h.lookups, 7);
        assert!((h.mean() - 119.0 / 7.0).abs() < 1e-12);
    }
}
