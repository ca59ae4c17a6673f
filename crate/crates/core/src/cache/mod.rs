//! Centroid cache management.
//!
//! Replacement runs in three steps over the live centroid set: merge the
//! repository into the cached centroids, filter the result down to capacity
//! by (cluster_size, access_count) and swap the survivors in progressively.
//! Spare capacity after centroid placement holds individual query vectors
//! under LRU (the overflow region).

mod baseline;
mod overflow;

pub use baseline::{baseline_step, BaselineCache, CacheEvent, ReplacementPolicy};
pub use overflow::OverflowRegion;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cluster::{AccessCount, Centroid, CentroidRepository, DEFAULT_THETA_C};
use crate::error::{invalid, Error, Result};
use crate::index::{CacheLookupResult, HitSource, HnswIndex, HnswParams, LevelPolicy, Outcome};
use crate::vector::{check_dims, dot, Embedding};

/// Fixed per-entry bookkeeping charged on top of vector and output bytes.
pub const ENTRY_METADATA_BYTES: u64 = 64;
pub const DEFAULT_DECAY: f64 = 1.1;
pub const DEFAULT_BATCH_SIZE: usize = 64;

/// Bytes charged for one cached entry.
pub fn entry_cost(dim: usize, output_len: usize) -> u64 {
    dim as u64 * 4 + output_len as u64 + ENTRY_METADATA_BYTES
}

pub fn centroid_cost(c: &Centroid) -> u64 {
    entry_cost(c.vector.dim(), c.output.len())
}

/// Cache capacity, either in bytes under the per-entry cost model or as a
/// plain entry count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Bytes(u64),
    Entries(u64),
}

impl Capacity {
    pub fn limit(self) -> u64 {
        match self {
            Capacity::Bytes(b) | Capacity::Entries(b) => b,
        }
    }

    /// Usage of one entry in this capacity's unit.
    pub fn charge(self, dim: usize, output_len: usize) -> u64 {
        match self {
            Capacity::Bytes(_) => entry_cost(dim, output_len),
            Capacity::Entries(_) => 1,
        }
    }

    pub fn usage<'a>(self, centroids: impl IntoIterator<Item = &'a Centroid>) -> u64 {
        centroids.into_iter().map(|c| self.charge(c.vector.dim(), c.output.len())).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub centroids: Vec<Centroid>,
    pub merged: usize,
    pub appended: usize,
}

/// Starts from a copy of `c_cur`; each repository centroid either folds its
/// cluster_size into the closest working-set centroid (cosine > `theta_c`)
/// or joins the working set with an infinite access count.
pub fn merge_centroids(c_cur: &[Centroid], c_repo: &[Centroid], theta_c: f64) -> MergeOutcome {
    let mut working: Vec<Centroid> = c_cur.to_vec();
    let (mut merged, mut appended) = (0, 0);
    for repo in c_repo {
        let closest = working
            .iter()
            .enumerate()
            .map(|(i, c)| (i, dot(c.vector.as_slice(), repo.vector.as_slice())))
            .fold(None, |best: Option<(usize, f64)>, (i, s)| match best {
                Some((_, bs)) if bs >= s => best,
                _ => Some((i, s)),
            });
        match closest {
            Some((i, s)) if s > theta_c => {
                working[i].cluster_size += repo.cluster_size;
                merged += 1;
            }
            _ => {
                let mut c = repo.clone();
                c.access_count = AccessCount::INFINITE;
                working.push(c);
                appended += 1;
            }
        }
    }
    MergeOutcome { centroids: working, merged, appended }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Survivors in input order, decayed, with access counts reset.
    pub survivors: Vec<Centroid>,
    pub evicted: Vec<u64>,
}

/// Eviction order: ascending (cluster_size, access_count, id).
fn eviction_order(a: &Centroid, b: &Centroid) -> std::cmp::Ordering {
    a.cluster_size
        .total_cmp(&b.cluster_size)
        .then(a.access_count.cmp(&b.access_count))
        .then(a.id.cmp(&b.id))
}

pub fn filter_centroids(c_new: Vec<Centroid>, capacity: Capacity) -> FilterOutcome {
    filter_centroids_with(c_new, capacity, DEFAULT_DECAY)
}

/// Evicts from the front of the ascending (cluster_size, access_count, id)
/// order until usage fits, then divides every survivor's cluster_size by
/// `decay` and zeroes its access count. Keys do not change while evicting,
/// so a single sort is equivalent to re-sorting before every removal.
pub fn filter_centroids_with(c_new: Vec<Centroid>, capacity: Capacity, decay: f64) -> FilterOutcome {
    let mut usage = capacity.usage(&c_new);
    let mut order: Vec<usize> = (0..c_new.len()).collect();
    order.sort_by(|&a, &b| eviction_order(&c_new[a], &c_new[b]));
    let mut evict = vec![false; c_new.len()];
    let mut evicted = Vec::new();
    for &i in &order {
        if usage <= capacity.limit() {
            break;
        }
        let c = &c_new[i];
        usage -= capacity.charge(c.vector.dim(), c.output.len());
        evict[i] = true;
        evicted.push(c.id);
    }
    if !c_new.is_empty() && evicted.len() == c_new.len() {
        log::warn!("capacity {capacity:?} cannot hold a single centroid; cache left empty");
    }
    let survivors = c_new
        .into_iter()
        .zip(evict)
        .filter(|(_, e)| !e)
        .map(|(mut c, _)| {
            c.cluster_size /= decay;
            c.access_count = AccessCount::ZERO;
            c
        })
        .collect();
    FilterOutcome { survivors, evicted }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub capacity: Capacity,
    pub theta_c: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub overflow: bool,
    pub hnsw: HnswParams,
    pub level_policy: LevelPolicy,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            capacity: Capacity::Bytes(64 << 20),
            theta_c: DEFAULT_THETA_C,
            decay: DEFAULT_DECAY,
            batch_size: DEFAULT_BATCH_SIZE,
            overflow: true,
            hnsw: HnswParams::default(),
            level_policy: LevelPolicy::Locality,
        }
    }
}

#[derive(Debug)]
struct LiveCentroid {
    centroid: Centroid,
    hits: AtomicU64,
}

impl LiveCentroid {
    fn new(c: Centroid) -> Arc<Self> {
        let hits = AtomicU64::new(c.access_count.raw());
        Arc::new(LiveCentroid { centroid: c, hits })
    }

    fn bump(&self) {
        let _ = self.hits.fetch_update(Ordering::Relaxed, Ordering::Relaxed, |v| {
            let next = AccessCount::from_raw(v).incremented().raw();
            (next != v).then_some(next)
        });
    }

    fn snapshot(&self) -> Centroid {
        let mut c = self.centroid.clone();
        c.access_count = AccessCount::from_raw(self.hits.load(Ordering::Relaxed));
        c
    }
}

/// Immutable view of the live centroid set. Readers hold one of these for
/// the duration of a lookup; writers publish a new one per batch.
#[derive(Debug, Clone)]
pub struct CacheView {
    epoch: u64,
    centroids: HashMap<u64, Arc<LiveCentroid>>,
    index: HnswIndex,
}

impl CacheView {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.centroids.contains_key(&id)
    }

    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.centroids.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn centroid(&self, id: u64) -> Option<Centroid> {
        self.centroids.get(&id).map(|c| c.snapshot())
    }

    pub fn index(&self) -> &HnswIndex {
        &self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub epoch: u64,
    pub batches: usize,
    pub added: usize,
    pub removed: usize,
    pub modified: usize,
}

/// One replacement run, logged as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementEvent {
    pub epoch: u64,
    pub merged: usize,
    pub appended: usize,
    pub evicted: usize,
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub duration_ms: f64,
}

enum Change {
    Remove(u64),
    Upsert(Centroid, bool),
}

/// Serializable state of a cache, used by the command line tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticCacheState {
    pub config: CacheConfig,
    pub epoch: u64,
    pub centroids: Vec<Centroid>,
    #[serde(default)]
    pub overflow_entries: Vec<(Embedding, String)>,
}

/// Live semantic cache: many concurrent readers, at most one replacement
/// writer at a time.
pub struct SemanticCache {
    config: CacheConfig,
    view: RwLock<Arc<CacheView>>,
    updating: AtomicBool,
    overflow: Mutex<OverflowRegion>,
    dim: Mutex<Option<usize>>,
}

struct UpdateGuard<'a>(&'a AtomicBool);

impl Drop for UpdateGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl SemanticCache {
    pub fn new(config: CacheConfig) -> Result<Self> {
        if config.capacity.limit() == 0 {
            return Err(invalid("capacity must be positive"));
        }
        if config.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(config.decay >= 1.0) {
            return Err(invalid("decay must be >= 1"));
        }
        let view = CacheView {
            epoch: 0,
            centroids: HashMap::new(),
            index: HnswIndex::new(config.hnsw, config.level_policy),
        };
        let overflow_budget = if config.overflow { config.capacity.limit() } else { 0 };
        Ok(SemanticCache {
            config,
            view: RwLock::new(Arc::new(view)),
            updating: AtomicBool::new(false),
            overflow: Mutex::new(OverflowRegion::new(config.capacity, overflow_budget)),
            dim: Mutex::new(None),
        })
    }

    /// Restores a cache from saved state (centroids go in as one epoch).
    pub fn from_state(state: &SemanticCacheState) -> Result<Self> {
        let cache = SemanticCache::new(state.config)?;
        let index = HnswIndex::build(&state.centroids, state.config.hnsw, state.config.level_policy)?;
        let centroids = state.centroids.iter().map(|c| (c.id, LiveCentroid::new(c.clone()))).collect();
        if let Some(c) = state.centroids.first() {
            *cache.dim.lock().expect("poisoned") = Some(c.vector.dim());
        }
        *cache.view.write().expect("poisoned") = Arc::new(CacheView { epoch: state.epoch, centroids, index });
        cache.resize_overflow();
        {
            let mut ov = cache.overflow.lock().expect("poisoned");
            for (v, o) in &state.overflow_entries {
                ov.insert(v.clone(), o.clone());
            }
        }
        Ok(cache)
    }

    pub fn state(&self) -> SemanticCacheState {
        let view = self.view();
        SemanticCacheState {
            config: self.config,
            epoch: view.epoch,
            centroids: self.centroids(),
            overflow_entries: self.overflow.lock().expect("poisoned").entries_lru_order(),
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    /// Current view; cloning the `Arc` is the only work done under the lock.
    pub fn view(&self) -> Arc<CacheView> {
        self.view.read().expect("poisoned").clone()
    }

    pub fn epoch(&self) -> u64 {
        self.view().epoch
    }

    /// Live centroids with current access counts, ordered by id.
    pub fn centroids(&self) -> Vec<Centroid> {
        let view = self.view();
        let mut out: Vec<Centroid> = view.centroids.values().map(|c| c.snapshot()).collect();
        out.sort_by_key(|c| c.id);
        out
    }

    pub fn centroid_usage(&self) -> u64 {
        let view = self.view();
        view.centroids
            .values()
            .map(|c| self.config.capacity.charge(c.centroid.vector.dim(), c.centroid.output.len()))
            .sum()
    }

    /// Usage of centroids plus overflow entries, in the capacity's unit.
    pub fn memory_usage(&self) -> u64 {
        self.centroid_usage() + self.overflow.lock().expect("poisoned").used()
    }

    /// Memory in bytes under the entry cost model regardless of capacity
    /// unit.
    pub fn memory_bytes(&self) -> u64 {
        let view = self.view();
        let c: u64 = view.centroids.values().map(|c| centroid_cost(&c.centroid)).sum();
        c + self.overflow.lock().expect("poisoned").bytes()
    }

    pub fn overflow_len(&self) -> usize {
        self.overflow.lock().expect("poisoned").len()
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        let mut d = self.dim.lock().expect("poisoned");
        match *d {
            Some(expected) => check_dims(expected, dim),
            None => {
                *d = Some(dim);
                Ok(())
            }
        }
    }

    pub fn record_hit(&self, id: u64) -> Result<()> {
        let view = self.view();
        view.centroids.get(&id).ok_or(Error::UnknownId(id))?.bump();
        Ok(())
    }

    fn search(&self, view: &CacheView, query: &Embedding, theta_r: f64, touch: bool) -> Result<CacheLookupResult> {
        let found = view.index.search(query, theta_r)?;
        if let Some((id, sim)) = found.hit {
            let live = view.centroids.get(&id).expect("index and view agree");
            return Ok(CacheLookupResult {
                outcome: Outcome::Hit,
                centroid_id: Some(id),
                similarity: Some(sim),
                output: Some(live.centroid.output.clone()),
                source: Some(HitSource::Centroid),
                distance_computations: found.distance_computations,
            });
        }
        let mut ov = self.overflow.lock().expect("poisoned");
        let (hit, scanned) = ov.lookup(query, theta_r, touch)?;
        let dc = found.distance_computations + scanned;
        Ok(match hit {
            Some((sim, output)) => CacheLookupResult {
                outcome: Outcome::Hit,
                centroid_id: None,
                similarity: Some(sim),
                output: Some(output),
                source: Some(HitSource::Overflow),
                distance_computations: dc,
            },
            None => CacheLookupResult::miss(dc),
        })
    }

    /// Serving-path lookup: centroid hits bump the access count, overflow
    /// hits refresh LRU recency.
    pub fn lookup(&self, query: &Embedding, theta_r: f64) -> Result<CacheLookupResult> {
        let view = self.view();
        let r = self.search(&view, query, theta_r, true)?;
        if let (Some(HitSource::Centroid), Some(id)) = (r.source, r.centroid_id) {
            if let Some(live) = view.centroids.get(&id) {
                live.bump();
            }
        }
        Ok(r)
    }

    /// Side-effect free lookup, used for threshold-to-hit-ratio sampling.
    pub fn probe(&self, query: &Embedding, theta_r: f64) -> Result<CacheLookupResult> {
        let view = self.view();
        self.search(&view, query, theta_r, false)
    }

    /// Stores an individual query vector in the overflow region, if enabled.
    pub fn insert_overflow(&self, vector: Embedding, output: String) -> Result<()> {
        if !self.config.overflow {
            return Ok(());
        }
        self.check_dim(vector.dim())?;
        self.overflow.lock().expect("poisoned").insert(vector, output);
        Ok(())
    }

    fn resize_overflow(&self) {
        let budget = if self.config.overflow {
            self.config.capacity.limit().saturating_sub(self.centroid_usage())
        } else {
            0
        };
        self.overflow.lock().expect("poisoned").set_budget(budget);
    }

    pub fn update_centroids(&self, c_new: Vec<Centroid>) -> Result<UpdateReport> {
        self.update_centroids_observed(c_new, |_| {})
    }

    /// Progressive swap to `c_new`, publishing a consistent view after every
    /// batch of at most `batch_size` changes. `between_batches` runs after
    /// each publish (test hook). Fails with [`Error::UpdateInFlight`] when
    /// another update is running.
    pub fn update_centroids_observed(
        &self,
        c_new: Vec<Centroid>,
        mut between_batches: impl FnMut(usize),
    ) -> Result<UpdateReport> {
        if self.updating.swap(true, Ordering::AcqRel) {
            return Err(Error::UpdateInFlight);
        }
        let _guard = UpdateGuard(&self.updating);

        let mut seen = std::collections::HashSet::new();
        for c in &c_new {
            if !seen.insert(c.id) {
                return Err(Error::DuplicateId(c.id));
            }
            self.check_dim(c.vector.dim())?;
        }

        let old = self.view();
        let new_by_id: BTreeMap<u64, &Centroid> = c_new.iter().map(|c| (c.id, c)).collect();
        let mut changes = Vec::new();
        for id in old.ids() {
            if !new_by_id.contains_key(&id) {
                changes.push(Change::Remove(id));
            }
        }
        let (mut added, mut modified) = (0, 0);
        for (&id, &c) in &new_by_id {
            match old.centroids.get(&id) {
                None => {
                    added += 1;
                    changes.push(Change::Upsert(c.clone(), true));
                }
                Some(live) => {
                    let current = live.snapshot();
                    if current != *c {
                        modified += 1;
                        let moved = current.vector != c.vector;
                        changes.push(Change::Upsert(c.clone(), moved));
                    }
                }
            }
        }
        let removed = changes.iter().filter(|c| matches!(c, Change::Remove(_))).count();

        let mut batches = 0;
        for batch in changes.chunks(self.config.batch_size) {
            let cur = self.view();
            let mut next = CacheView::clone(&cur);
            for change in batch {
                match change {
                    Change::Remove(id) => {
                        next.centroids.remove(id);
                        next.index.remove(*id)?;
                    }
                    Change::Upsert(c, reindex) => {
                        if *reindex {
                            if next.index.contains(c.id) {
                                next.index.remove(c.id)?;
                            }
                            next.index.insert(c)?;
                        }
                        next.centroids.insert(c.id, LiveCentroid::new(c.clone()));
                    }
                }
            }
            *self.view.write().expect("poisoned") = Arc::new(next);
            batches += 1;
            between_batches(batches);
        }

        // Epoch boundary: drop tombstones and restore the level profile.
        let cur = self.view();
        let index = cur.index.compacted()?;
        let epoch = cur.epoch + 1;
        *self.view.write().expect("poisoned") =
            Arc::new(CacheView { epoch, centroids: cur.centroids.clone(), index });
        self.resize_overflow();
        Ok(UpdateReport { epoch, batches, added, removed, modified })
    }

    /// Merge, filter and progressive update against a freshly built
    /// repository.
    pub fn run_replacement(&self, repo: &CentroidRepository) -> Result<ReplacementEvent> {
        let started = Instant::now();
        let current = self.centroids();
        if let (Some(c), Some(d)) = (current.first(), repo.dim()) {
            check_dims(c.vector.dim(), d)?;
        }
        let bytes_before = self.memory_bytes();

        // Repository ids are local to one build; re-key any that collide with
        // live ids so appended centroids stay unique.
        let mut next_id = current.iter().chain(&repo.centroids).map(|c| c.id + 1).max().unwrap_or(0);
        let live: std::collections::HashSet<u64> = current.iter().map(|c| c.id).collect();
        let mut repo_centroids = repo.centroids.clone();
        for c in &mut repo_centroids {
            if live.contains(&c.id) {
                c.id = next_id;
                next_id += 1;
            }
        }

        let merged = merge_centroids(&current, &repo_centroids, self.config.theta_c);
        let before_filter = merged.centroids.len();
        let filtered = filter_centroids_with(merged.centroids, self.config.capacity, self.config.decay);
        let report = self.update_centroids(filtered.survivors)?;
        debug_assert_eq!(before_filter - filtered.evicted.len(), self.view().len());
        Ok(ReplacementEvent {
            epoch: report.epoch,
            merged: merged.merged,
            appended: merged.appended,
            evicted: filtered.evicted.len(),
            bytes_before,
            bytes_after: self.memory_bytes(),
            duration_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}
