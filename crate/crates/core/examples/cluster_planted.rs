//! Clusters a planted corpus and compares the recovered communities with
//! the planted ones.

use std::collections::HashMap;

use centroid_cache::cluster::build_repository;
use centroid_cache::corpus::{PlantedModel, PlantedSpec};

fn main() -> centroid_cache::Result<()> {
    let model = PlantedModel::new(PlantedSpec {
        n_clusters: 40,
        per_cluster: 50,
        intra_sim: 0.9,
        zipf_s: 1.0,
        dim: 128,
        seed: 7,
        ..Default::default()
    })?;
    let log = model.corpus();
    let started = std::time::Instant::now();
    let repo = build_repository(&log, 0.86, 2)?;
    println!(
        "{} queries -> {} communities in {:.2}s",
        log.len(),
        repo.community_count(),
        started.elapsed().as_secs_f64()
    );

    // Every record carries its planted cluster's canned response, so the
    // output string tells us which planted cluster a centroid stands for.
    let mut per_output: HashMap<&str, usize> = HashMap::new();
    for c in &repo.centroids {
        *per_output.entry(c.output.as_str()).or_default() += 1;
    }
    let split = per_output.values().filter(|&&n| n > 1).count();
    println!("planted clusters recovered: {} (split into several: {split})", per_output.len());

    println!("largest communities:");
    let mut sizes: Vec<_> = repo.centroids.iter().map(|c| (c.cluster_size, c.output.clone())).collect();
    sizes.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (size, output) in sizes.iter().take(5) {
        println!("  {size:>5.0}  {output}");
    }
    println!("size histogram: {:?}", repo.size_histogram());
    Ok(())
}
