//! Compares search cost of the locality-aware level assignment with the
//! usual random levels on a skewed query stream.

use centroid_cache::cluster::build_repository;
use centroid_cache::corpus::{PlantedModel, PlantedSpec};
use centroid_cache::index::{HnswIndex, HnswParams, LevelPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> centroid_cache::Result<()> {
    let model = PlantedModel::new(PlantedSpec {
        n_clusters: 2000,
        per_cluster: 4,
        intra_sim: 0.9,
        zipf_s: 1.2,
        dim: 64,
        seed: 11,
        ..Default::default()
    })?;
    let repo = build_repository(&model.corpus(), 0.86, 1)?;
    println!("{} centroids", repo.len());

    let params = HnswParams::default();
    for (name, policy) in [("locality", LevelPolicy::Locality), ("random", LevelPolicy::Random { seed: 1 })] {
        let index = HnswIndex::build(&repo.centroids, params, policy)?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut hits, mut work, n) = (0, 0u64, 5000);
        for _ in 0..n {
            let cluster = model.sample_cluster(&mut rng);
            let q = model.sample_member(cluster, &mut rng);
            let out = index.search(&q, 0.86)?;
            hits += usize::from(out.hit.is_some());
            work += out.distance_computations;
        }
        println!(
            "{name:>8}: top level {}, hit ratio {:.3}, mean distance computations {:.1}",
            index.max_level(),
            hits as f64 / n as f64,
            work as f64 / n as f64
        );
    }
    Ok(())
}
