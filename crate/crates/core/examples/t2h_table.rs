//! Builds the threshold-to-hit-ratio table for a warmed cache and prints
//! it alongside the threshold the controller would pick at a few loads.

use centroid_cache::cache::{CacheConfig, Capacity, SemanticCache};
use centroid_cache::cluster::build_repository;
use centroid_cache::controller::{build_t2h, choose_theta, default_grid, estimate_wait};
use centroid_cache::corpus::{PlantedModel, PlantedSpec};

fn main() -> centroid_cache::Result<()> {
    let model = PlantedModel::new(PlantedSpec {
        n_clusters: 300,
        per_cluster: 10,
        intra_sim: 0.86,
        intra_sim_jitter: 0.03,
        zipf_s: 1.0,
        families: 30,
        family_sim: 0.6,
        dim: 64,
        seed: 5,
        ..Default::default()
    })?;
    let log = model.corpus();
    let cache = SemanticCache::new(CacheConfig { capacity: Capacity::Entries(150), overflow: false, ..Default::default() })?;
    cache.run_replacement(&build_repository(&log, 0.82, 2)?)?;

    let table = build_t2h(&cache, &log, 0.1, &default_grid(), 1)?;
    println!("sampled {} queries", table.sample_count);
    println!("theta  hit ratio");
    for (theta, h) in &table.entries {
        println!("{theta:.2}   {h:.3}");
    }

    // One request takes L seconds on the LLM; the SLO allows 1.5 L.
    let l = 0.1;
    println!("\n rate  theta  est. wait");
    for lambda in [2.0, 6.0, 9.0, 12.0, 15.0] {
        let theta = choose_theta(&table, lambda, l, 1.5 * l);
        let w = estimate_wait(lambda, l, table.hit_ratio(theta));
        println!("{lambda:>5.1}  {theta:.2}   {w:.3}s");
    }
    Ok(())
}
