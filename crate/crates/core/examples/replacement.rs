//! Runs two replacement rounds against a small cache: the first fills it
//! from scratch, the second folds a fresh repository into the survivors.

use centroid_cache::cache::{CacheConfig, Capacity, SemanticCache};
use centroid_cache::cluster::build_repository;
use centroid_cache::corpus::{PlantedModel, PlantedSpec};

fn main() -> centroid_cache::Result<()> {
    let spec = PlantedSpec { n_clusters: 30, per_cluster: 20, zipf_s: 1.0, dim: 64, seed: 3, ..Default::default() };
    let model = PlantedModel::new(spec)?;
    let log = model.corpus();
    let (first, second) = log.split_at(log.len() / 2);

    let cache = SemanticCache::new(CacheConfig { capacity: Capacity::Entries(12), overflow: false, ..Default::default() })?;
    for (round, half) in [first, second].into_iter().enumerate() {
        let repo = build_repository(half, 0.86, 2)?;
        let event = cache.run_replacement(&repo)?;
        println!(
            "round {}: repository {} -> merged {}, appended {}, evicted {}; {} bytes",
            round + 1,
            repo.len(),
            event.merged,
            event.appended,
            event.evicted,
            event.bytes_after
        );
    }

    let mut kept = cache.centroids();
    kept.sort_by(|a, b| b.cluster_size.total_cmp(&a.cluster_size));
    println!("cached centroids by weight:");
    for c in kept {
        println!("  id {:>4}  size {:>6.1}  {}", c.id, c.cluster_size, c.output);
    }
    Ok(())
}
