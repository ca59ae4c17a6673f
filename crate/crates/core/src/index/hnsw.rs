//! HNSW graph with pluggable level assignment.
//!
//! With [`LevelPolicy::Locality`] the node's level comes from its rank by
//! cluster size (see [`assign_level`](super::assign_level)), so centroids
//! that represent many queries sit in the sparse upper layers. Threshold
//! search stops descending as soon as an upper-layer node clears the
//! retrieval threshold.
//!
//! Removal is a tombstone: the node keeps routing traffic but is never
//! returned. [`HnswIndex::compacted`] rebuilds the graph over live nodes.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assign_level;
use crate::cluster::Centroid;
use crate::error::{Error, Result};
use crate::util::OrdF64;
use crate::vector::{check_dims, dot, Embedding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Max out-degree above level 0; level 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub early_termination: bool,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams { m: 16, ef_construction: 200, ef_search: 64, early_termination: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelPolicy {
    /// Rank-by-cluster-size quota levels.
    Locality,
    /// Standard exponential random levels.
    Random { seed: u64 },
}

#[derive(Debug, Clone)]
struct Node {
    id: u64,
    vector: Arc<[f32]>,
    cluster_size: f64,
    level: usize,
    links: Vec<Vec<u32>>,
    deleted: bool,
}

/// Candidate ordering: higher similarity first, then lower node index.
type Key = (OrdF64, Reverse<u32>);

fn key(sim: f64, idx: u32) -> Key {
    (OrdF64(sim), Reverse(idx))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOutcome {
    /// Best live node found and its similarity.
    pub best: Option<(u64, f64)>,
    /// `best` when it clears the threshold.
    pub hit: Option<(u64, f64)>,
    pub distance_computations: u64,
    /// Level at which the search stopped (0 = full descent).
    pub stop_level: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub nodes: usize,
    pub mean_degree: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub live: usize,
    pub tombstones: usize,
    pub levels: Vec<LevelStats>,
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    params: HnswParams,
    policy: LevelPolicy,
    dim: Option<usize>,
    nodes: Vec<Node>,
    by_id: HashMap<u64, u32>,
    entry: Option<u32>,
    max_level: usize,
    live: usize,
    rng: ChaCha8Rng,
}

impl HnswIndex {
    pub fn new(params: HnswParams, policy: LevelPolicy) -> Self {
        let seed = match policy {
            LevelPolicy::Random { seed } => seed,
            LevelPolicy::Locality => 0,
        };
        HnswIndex {
            params,
            policy,
            dim: None,
            nodes: Vec::new(),
            by_id: HashMap::new(),
            entry: None,
            max_level: 0,
            live: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Builds an index over `centroids`, inserting in descending
    /// cluster_size order (ties by id) so upper layers form first.
    pub fn build(centroids: &[Centroid], params: HnswParams, policy: LevelPolicy) -> Result<Self> {
        let mut index = HnswIndex::new(params, policy);
        let mut order: Vec<&Centroid> = centroids.iter().collect();
        order.sort_by(|a, b| b.cluster_size.total_cmp(&a.cluster_size).then(a.id.cmp(&b.id)));
        let mut seen = std::collections::HashSet::new();
        for c in &order {
            if !seen.insert(c.id) {
                return Err(Error::DuplicateId(c.id));
            }
        }
        let total = order.len();
        for (rank, c) in order.into_iter().enumerate() {
            let level = match policy {
                LevelPolicy::Locality => assign_level(rank, total, params.m),
                LevelPolicy::Random { .. } => index.random_level(),
            };
            index.insert_at_level(c.id, c.vector.as_slice().into(), c.cluster_size, level)?;
        }
        Ok(index)
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn contains(&self, id: u64) -> bool {
        self.by_id.get(&id).is_some_and(|&i| !self.nodes[i as usize].deleted)
    }

    /// Level of a live node.
    pub fn level_of(&self, id: u64) -> Option<usize> {
        self.by_id
            .get(&id)
            .map(|&i| &self.nodes[i as usize])
            .filter(|n| !n.deleted)
            .map(|n| n.level)
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn entry_id(&self) -> Option<u64> {
        self.entry.map(|e| self.nodes[e as usize].id)
    }

    pub fn live_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.nodes.iter().filter(|n| !n.deleted).map(|n| n.id)
    }

    fn random_level(&mut self) -> usize {
        let ml = 1.0 / (self.params.m.max(2) as f64).ln();
        let u: f64 = self.rng.random_range(f64::EPSILON..1.0);
        (-u.ln() * ml).floor() as usize
    }

    fn max_links(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    #[inline]
    fn sim(&self, q: &[f32], idx: u32) -> f64 {
        dot(q, &self.nodes[idx as usize].vector)
    }

    /// Inserts a centroid. The level follows the index's policy; under
    /// locality it is the quota level of the centroid's rank among the live
    /// nodes.
    pub fn insert(&mut self, centroid: &Centroid) -> Result<()> {
        if self.contains(centroid.id) {
            return Err(Error::DuplicateId(centroid.id));
        }
        let level = match self.policy {
            LevelPolicy::Locality => {
                let rank = self
                    .nodes
                    .iter()
                    .filter(|n| !n.deleted)
                    .filter(|n| {
                        n.cluster_size > centroid.cluster_size
                            || (n.cluster_size == centroid.cluster_size && n.id < centroid.id)
                    })
                    .count();
                assign_level(rank, self.live + 1, self.params.m)
            }
            LevelPolicy::Random { .. } => self.random_level(),
        };
        self.insert_at_level(centroid.id, centroid.vector.as_slice().into(), centroid.cluster_size, level)
    }

    fn insert_at_level(&mut self, id: u64, vector: Arc<[f32]>, cluster_size: f64, level: usize) -> Result<()> {
        match self.dim {
            Some(d) => check_dims(d, vector.len())?,
            None => self.dim = Some(vector.len()),
        }
        if self.contains(id) {
            return Err(Error::DuplicateId(id));
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            id,
            vector: vector.clone(),
            cluster_size,
            level,
            links: vec![Vec::new(); level + 1],
            deleted: false,
        });
        self.by_id.insert(id, idx);
        self.live += 1;

        let Some(entry) = self.entry else {
            self.entry = Some(idx);
            self.max_level = level;
            return Ok(());
        };

        let q = &*vector;
        let mut counter = 0u64;
        let mut ep = entry;
        for lc in (level + 1..=self.max_level).rev() {
            ep = self.greedy(q, ep, lc, &mut counter).0;
        }
        let mut eps = vec![ep];
        for lc in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(q, &eps, self.params.ef_construction, lc, &mut counter);
            let chosen = self.select_neighbors(&found, self.params.m);
            self.nodes[idx as usize].links[lc] = chosen.clone();
            for &n in &chosen {
                self.link(n, idx, lc);
            }
            eps = found.iter().map(|&(_, i)| i).collect();
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(idx);
        }
        Ok(())
    }

    /// Adds `to` to `from`'s level-`lc` list, shrinking it with the
    /// neighbor heuristic when over budget.
    fn link(&mut self, from: u32, to: u32, lc: usize) {
        let cap = self.max_links(lc);
        let links = &self.nodes[from as usize].links[lc];
        if links.contains(&to) {
            return;
        }
        if links.len() < cap {
            self.nodes[from as usize].links[lc].push(to);
            return;
        }
        let base = self.nodes[from as usize].vector.clone();
        let mut cands: Vec<(f64, u32)> = links
            .iter()
            .chain(std::iter::once(&to))
            .map(|&n| (self.sim(&base, n), n))
            .collect();
        cands.sort_by(|a, b| key(b.0, b.1).cmp(&key(a.0, a.1)));
        let chosen = self.select_neighbors(&cands, cap);
        self.nodes[from as usize].links[lc] = chosen;
    }

    /// Diversity heuristic with pruned-candidate backfill. `cands` must be
    /// sorted best first.
    fn select_neighbors(&self, cands: &[(f64, u32)], m: usize) -> Vec<u32> {
        let mut chosen: Vec<u32> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for &(s, c) in cands {
            if chosen.len() >= m {
                break;
            }
            let cv = &self.nodes[c as usize].vector;
            if chosen.iter().all(|&r| self.sim(cv, r) < s) {
                chosen.push(c);
            } else {
                pruned.push(c);
            }
        }
        for c in pruned {
            if chosen.len() >= m {
                break;
            }
            chosen.push(c);
        }
        chosen
    }

    /// Greedy walk on one level. Returns the local optimum, its similarity
    /// and the best live node seen along the way.
    fn greedy(&self, q: &[f32], start: u32, lc: usize, counter: &mut u64) -> (u32, f64, Option<(u32, f64)>) {
        let mut cur = start;
        let mut cur_sim = self.sim(q, cur);
        *counter += 1;
        let mut best_live = (!self.nodes[cur as usize].deleted).then_some((cur, cur_sim));
        loop {
            let mut changed = false;
            for &n in &self.nodes[cur as usize].links[lc] {
                let s = self.sim(q, n);
                *counter += 1;
                if !self.nodes[n as usize].deleted && best_live.is_none_or(|(b, bs)| key(s, n) > key(bs, b)) {
                    best_live = Some((n, s));
                }
                if key(s, n) > key(cur_sim, cur) {
                    cur = n;
                    cur_sim = s;
                    changed = true;
                }
            }
            if !changed {
                return (cur, cur_sim, best_live);
            }
        }
    }

    /// Beam search on one level; returns up to `ef` nodes best first.
    fn search_layer(&self, q: &[f32], eps: &[u32], ef: usize, lc: usize, counter: &mut u64) -> Vec<(f64, u32)> {
        let ef = ef.max(1);
        let mut visited = vec![false; self.nodes.len()];
        let mut candidates: BinaryHeap<Key> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Key>> = BinaryHeap::new();
        for &e in eps {
            if std::mem::replace(&mut visited[e as usize], true) {
                continue;
            }
            let s = self.sim(q, e);
            *counter += 1;
            candidates.push(key(s, e));
            results.push(Reverse(key(s, e)));
            if results.len() > ef {
                results.pop();
            }
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().expect("non-empty").0;
            if results.len() >= ef && c < worst {
                break;
            }
            let ci = (c.1).0;
            for &n in &self.nodes[ci as usize].links[lc] {
                if std::mem::replace(&mut visited[n as usize], true) {
                    continue;
                }
                let s = self.sim(q, n);
                *counter += 1;
                let k = key(s, n);
                if results.len() < ef || k > results.peek().expect("non-empty").0 {
                    candidates.push(k);
                    results.push(Reverse(k));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Key> = results.into_iter().map(|Reverse(k)| k).collect();
        out.sort_by(|a, b| b.cmp(a));
        out.into_iter().map(|(s, Reverse(i))| (s.0, i)).collect()
    }

    fn descend(&self, query: &Embedding, theta: Option<f64>) -> Result<SearchOutcome> {
        let mut out = SearchOutcome { best: None, hit: None, distance_computations: 0, stop_level: 0 };
        let Some(entry) = self.entry else {
            return Ok(out);
        };
        check_dims(self.dim.unwrap_or(query.dim()), query.dim())?;
        if self.live == 0 {
            return Ok(out);
        }
        let q = query.as_slice();
        let mut counter = 0u64;
        let mut best: Option<(u32, f64)> = None;
        let better = |cand: Option<(u32, f64)>, cur: Option<(u32, f64)>| match (cand, cur) {
            (Some((c, cs)), Some((b, bs))) if key(cs, c) > key(bs, b) => Some((c, cs)),
            (Some(x), None) => Some(x),
            (_, cur) => cur,
        };
        let mut ep = entry;
        for lc in (1..=self.max_level).rev() {
            let (local, _, seen) = self.greedy(q, ep, lc, &mut counter);
            ep = local;
            best = better(seen, best);
            if let (Some(t), true, Some((_, bs))) = (theta, self.params.early_termination, best) {
                if bs >= t {
                    out.stop_level = lc;
                    break;
                }
            }
        }
        if out.stop_level == 0 {
            let found = self.search_layer(q, &[ep], self.params.ef_search, 0, &mut counter);
            let live_best = found.into_iter().find(|&(_, i)| !self.nodes[i as usize].deleted);
            best = better(live_best.map(|(s, i)| (i, s)), best);
        }
        out.distance_computations = counter;
        out.best = best.map(|(i, s)| (self.nodes[i as usize].id, s));
        out.hit = match (theta, out.best) {
            (Some(t), Some((id, s))) if s >= t => Some((id, s)),
            _ => None,
        };
        Ok(out)
    }

    /// Threshold lookup with early termination in the upper layers.
    pub fn search(&self, query: &Embedding, theta_r: f64) -> Result<SearchOutcome> {
        self.descend(query, Some(theta_r))
    }

    /// Approximate nearest live neighbor with a full descent.
    pub fn nearest(&self, query: &Embedding) -> Result<Option<(u64, f64)>> {
        Ok(self.descend(query, None)?.best)
    }

    /// Tombstones a live node.
    pub fn remove(&mut self, id: u64) -> Result<()> {
        let idx = *self.by_id.get(&id).ok_or(Error::UnknownId(id))?;
        let node = &mut self.nodes[idx as usize];
        if node.deleted {
            return Err(Error::UnknownId(id));
        }
        node.deleted = true;
        self.live -= 1;
        Ok(())
    }

    pub fn tombstones(&self) -> usize {
        self.nodes.len() - self.live
    }

    /// Rebuilds over live nodes only, restoring the level profile.
    pub fn compacted(&self) -> Result<HnswIndex> {
        let live: Vec<Centroid> = self
            .nodes
            .iter()
            .filter(|n| !n.deleted)
            .map(|n| {
                Ok(Centroid::new(n.id, Embedding::new(n.vector.to_vec())?, String::new(), n.cluster_size))
            })
            .collect::<Result<_>>()?;
        HnswIndex::build(&live, self.params, self.policy)
    }

    pub fn stats(&self) -> IndexStats {
        let levels = (0..=self.max_level)
            .map(|l| {
                let at: Vec<&Node> = self.nodes.iter().filter(|n| !n.deleted && n.level >= l).collect();
                let degree: usize = at.iter().map(|n| n.links[l].len()).sum();
                LevelStats {
                    level: l,
                    nodes: at.len(),
                    mean_degree: if at.is_empty() { 0.0 } else { degree as f64 / at.len() as f64 },
                }
            })
            .collect();
        IndexStats { live: self.live, tombstones: self.tombstones(), levels }
    }

    /// Structural invariants: layer nesting, degree bounds and level-0
    /// reachability of every live node from the entry point.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.links.len() != n.level + 1 {
                return Err(format!("node {i}: {} link lists for level {}", n.links.len(), n.level));
            }
            for (l, links) in n.links.iter().enumerate() {
                if links.len() > self.max_links(l) {
                    return Err(format!("node {i}: {} links at level {l}", links.len()));
                }
                if let Some(&bad) = links.iter().find(|&&t| self.nodes[t as usize].level < l) {
                    return Err(format!("node {i}: link to {bad} absent from level {l}"));
                }
            }
        }
        let Some(entry) = self.entry else {
            return Ok(());
        };
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![entry];
        seen[entry as usize] = true;
        while let Some(i) = stack.pop() {
            for &n in &self.nodes[i as usize].links[0] {
                if !std::mem::replace(&mut seen[n as usize], true) {
                    stack.push(n);
                }
            }
        }
        match self.nodes.iter().enumerate().find(|(i, n)| !n.deleted && !seen[*i]) {
            Some((i, _)) => Err(format!("node {i} unreachable at level 0")),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::brute_force_search;
    use crate::vector::random_unit;

    fn centroids(n: usize, dim: usize, seed: u64) -> Vec<Centroid> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v: Vec<f32> = random_unit(dim, &mut rng).into_iter().map(|x| x as f32).collect();
                let size = rng.random_range(1..100) as f64;
                Centroid::new(i as u64, Embedding::new(v).unwrap(), format!("o{i}"), size)
            })
            .collect()
    }

    #[test]
    fn empty_index_misses() {
        let idx = HnswIndex::build(&[], HnswParams::default(), LevelPolicy::Locality).unwrap();
        let q = Embedding::new(vec![1.0, 0.0]).unwrap();
        let r = idx.search(&q, 0.5).unwrap();
        assert!(r.hit.is_none());
        assert_eq!(r.distance_computations, 0);
    }

    #[test]
    fn single_centroid_hits_above_threshold() {
        let cs = centroids(1, 8, 0);
        let idx = HnswIndex::build(&cs, HnswParams::default(), LevelPolicy::Locality).unwrap();
        assert_eq!(idx.level_of(0), Some(0));
        assert_eq!(idx.entry_id(), Some(0));
        let r = idx.search(&cs[0].vector, 0.86).unwrap();
        assert_eq!(r.hit.map(|h| h.0), Some(0));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut cs = centroids(3, 8, 0);
        cs[2].id = 0;
        assert!(matches!(
            HnswIndex::build(&cs, HnswParams::default(), LevelPolicy::Locality),
            Err(Error::DuplicateId(0))
        ));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cs = centroids(5, 8, 0);
        let idx = HnswIndex::build(&cs, HnswParams::default(), LevelPolicy::Locality).unwrap();
        let q = Embedding::new(vec![1.0; 4]).unwrap();
        assert!(matches!(idx.search(&q, 0.5), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn exact_member_hits_and_orthogonal_misses() {
        let cs = centroids(300, 32, 1);
        let idx = HnswIndex::build(&cs, HnswParams::default(), LevelPolicy::Locality).unwrap();
        for c in cs.iter().step_by(7) {
            let r = idx.search(&c.vector, 0.86).unwrap();
            let (id, s) = r.hit.expect("exact member must hit");
            assert_eq!(id, c.id);
            assert!((s - 1.0).abs() < 1e-6);
        }
        let mut v = vec![0.0f32; 33];
        v[32] = 1.0;
        let idx2 = HnswIndex::build(
            &cs.iter()
                .map(|c| {
                    let mut x = c.vector.as_slice().to_vec();
                    x.push(0.0);
                    Centroid::new(c.id, Embedding::new(x).unwrap(), "", c.cluster_size)
                })
                .collect::<Vec<_>>(),
            HnswParams::default(),
            LevelPolicy::Locality,
        )
        .unwrap();
        assert!(idx2.search(&Embedding::new(v).unwrap(), 0.1).unwrap().hit.is_none());
    }

    #[test]
    fn invariants_hold_and_levels_follow_cluster_size() {
        let cs = centroids(2000, 24, 2);
        let idx = HnswIndex::build(&cs, HnswParams::default(), LevelPolicy::Locality).unwrap();
        idx.check_invariants().unwrap();
        for a in cs.iter().step_by(13) {
            for b in cs.iter().step_by(17) {
                if a.cluster_size > b.cluster_size {
                    assert!(idx.level_of(a.id) >= idx.level_of(b.id));
                }
            }
        }
        let stats = idx.stats();
        assert_eq!(stats.levels[0].nodes, 2000);
        assert_eq!(stats.levels[1].nodes, 125);
    }

    #[test]
    fn builds_are_deterministic() {
        let cs = centroids(500, 16, 3);
        let a = HnswIndex::build(&cs, HnswParams::default(), LevelPolicy::Locality).unwrap();
        let b = HnswIndex::build(&cs, HnswParams::default(), LevelPolicy::Locality).unwrap();
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert_eq!(x.links, y.links);
        }
    }

    #[test]
    fn insert_then_remove() {
        let cs = centroids(200, 16, 4);
        let mut idx = HnswIndex::build(&cs[..199], HnswParams::default(), LevelPolicy::Locality).unwrap();
        idx.insert(&cs[199]).unwrap();
        assert!(matches!(idx.insert(&cs[199]), Err(Error::DuplicateId(199))));
        assert_eq!(idx.search(&cs[199].vector, 0.9).unwrap().hit.map(|h| h.0), Some(199));
        idx.remove(199).unwrap();
        assert!(matches!(idx.remove(199), Err(Error::UnknownId(199))));
        let r = idx.search(&cs[199].vector, -1.0).unwrap();
        assert_ne!(r.best.map(|b| b.0), Some(199));
        // Re-inserting a removed id is allowed.
        idx.insert(&cs[199]).unwrap();
        assert_eq!(idx.len(), 200);
        let c = idx.compacted().unwrap();
        assert_eq!(c.tombstones(), 0);
        assert_eq!(c.len(), 200);
        c.check_invariants().unwrap();
    }

    #[test]
    fn recall_after_churn() {
        let cs = centroids(1200, 16, 5);
        let mut idx = HnswIndex::build(&cs[..1000], HnswParams::default(), LevelPolicy::Locality).unwrap();
        let mut live: Vec<Centroid> = cs[..1000].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut spare = cs[1000..].to_vec();
        for _ in 0..100 {
            if rng.random_bool(0.5) && !spare.is_empty() {
                let c = spare.pop().unwrap();
                idx.insert(&c).unwrap();
                live.push(c);
            } else {
                let k = rng.random_range(0..live.len());
                let c = live.swap_remove(k);
                idx.remove(c.id).unwrap();
            }
        }
        let mut agree = 0;
        let probes = 300;
        for _ in 0..probes {
            let q = Embedding::new(random_unit(16, &mut rng).into_iter().map(|x| x as f32).collect()).unwrap();
            let exact = brute_force_search(&live, &q, -1.0).unwrap().centroid_id;
            if idx.nearest(&q).unwrap().map(|b| b.0) == exact {
                agree += 1;
            }
        }
        assert!(agree as f64 / probes as f64 >= 0.9, "recall {agree}/{probes}");
    }

    #[test]
    fn random_levels_have_exponential_profile() {
        let cs = centroids(3000, 8, 6);
        let idx = HnswIndex::build(&cs, HnswParams::default(), LevelPolicy::Random { seed: 1 }).unwrap();
        let s = idx.stats();
        let l1 = s.levels[1].nodes as f64;
        assert!((120.0..260.0).contains(&l1), "level 1 holds {l1}");
        idx.check_invariants().unwrap();
    }
}
