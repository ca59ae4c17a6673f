use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use centroid_cache::cache::{CacheConfig, Capacity, SemanticCache};
use centroid_cache::cluster::Centroid;
use centroid_cache::vector::Embedding;
use centroid_cache::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const DIM: usize = 24;

fn unit(rng: &mut impl Rng) -> Embedding {
    let v: Vec<f32> = (0..DIM).map(|_| StandardNormal.sample(rng)).collect();
    Embedding::normalized_from(v).unwrap()
}

/// Old set: ids 0..200. New set: ids 100..300, where 100..200 moved to new
/// vectors and outputs. The diff is 100 removals, 100 additions and 100
/// modifications; with batches of 30 that is ten published batches.
fn old_and_new() -> (Vec<Centroid>, Vec<Centroid>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let old = (0..200).map(|i| Centroid::new(i, unit(&mut rng), format!("old {i}"), 1.0 + i as f64)).collect();
    let new = (100..300).map(|i| Centroid::new(i, unit(&mut rng), format!("new {i}"), 1.0 + i as f64)).collect();
    (old, new)
}

#[test]
fn readers_only_see_whole_centroids_from_either_set() {
    let (old, new) = old_and_new();
    let cache = SemanticCache::new(CacheConfig {
        capacity: Capacity::Entries(1000),
        batch_size: 30,
        overflow: false,
        ..Default::default()
    })
    .unwrap();
    cache.update_centroids(old.clone()).unwrap();
    let old_by_id: HashMap<u64, &Centroid> = old.iter().map(|c| (c.id, c)).collect();
    let new_by_id: HashMap<u64, &Centroid> = new.iter().map(|c| (c.id, c)).collect();
    let done = AtomicBool::new(false);
    let lookups = AtomicUsize::new(0);

    let report = std::thread::scope(|s| {
        for r in 0..4u64 {
            let (cache, old, new, done, lookups) = (&cache, &old, &new, &done, &lookups);
            let (old_by_id, new_by_id) = (&old_by_id, &new_by_id);
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + r);
                let mut last_new_only = 0;
                while !done.load(Ordering::Acquire) {
                    let view = cache.view();
                    let ids = view.ids();
                    let mut new_only = 0;
                    for &id in &ids {
                        let c = view.centroid(id).unwrap();
                        let whole_old = old_by_id.get(&id).is_some_and(|o| o.vector == c.vector && o.output == c.output);
                        let whole_new = new_by_id.get(&id).is_some_and(|n| n.vector == c.vector && n.output == c.output);
                        assert!(whole_old || whole_new, "centroid {id} is neither the old nor the new version");
                        new_only += usize::from(!old_by_id.contains_key(&id));
                    }
                    // Views are published in order, so a reader never sees
                    // the transition go backwards.
                    assert!(new_only >= last_new_only);
                    last_new_only = new_only;

                    let pool = if rng.random_bool(0.5) { old } else { new };
                    let target = &pool[rng.random_range(0..pool.len())];
                    let res = cache.lookup(&target.vector, 0.99).unwrap();
                    if let (Some(id), Some(out)) = (res.centroid_id, res.output.as_deref()) {
                        let ok = old_by_id.get(&id).is_some_and(|c| c.output == out)
                            || new_by_id.get(&id).is_some_and(|c| c.output == out);
                        assert!(ok, "lookup returned id {id} with foreign output {out:?}");
                    }
                    lookups.fetch_add(1, Ordering::Relaxed);
                }
            });
        }
        let report = cache.update_centroids_observed(new.clone(), |_| std::thread::yield_now());
        done.store(true, Ordering::Release);
        report
    })
    .unwrap();

    assert_eq!(report.batches, 10);
    assert_eq!((report.added, report.removed, report.modified), (100, 100, 100));
    assert!(lookups.load(Ordering::Relaxed) > 0);
    let mut live = cache.centroids();
    live.sort_by_key(|c| c.id);
    assert_eq!(live.iter().map(|c| c.id).collect::<Vec<_>>(), (100..300).collect::<Vec<_>>());
    assert!(live.iter().zip(&new).all(|(a, b)| a.vector == b.vector && a.output == b.output));
}

#[test]
fn second_update_is_rejected_while_one_runs() {
    let (old, new) = old_and_new();
    let cache = SemanticCache::new(CacheConfig { capacity: Capacity::Entries(1000), batch_size: 30, ..Default::default() })
        .unwrap();
    cache.update_centroids(old.clone()).unwrap();
    let mut rejected = 0;
    cache
        .update_centroids_observed(new, |_| {
            if matches!(cache.update_centroids(old.clone()), Err(Error::UpdateInFlight)) {
                rejected += 1;
            }
        })
        .unwrap();
    assert_eq!(rejected, 10);
    // The guard is released once the update finishes.
    assert!(cache.update_centroids(old).is_ok());
}
