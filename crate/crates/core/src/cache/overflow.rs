use std::collections::{BTreeMap, HashMap};

use super::Capacity;
use crate::error::Result;
use crate::vector::{check_dims, dot, Embedding};

#[derive(Debug, Clone)]
struct Entry {
    vector: Embedding,
    output: String,
    last_used: u64,
}

/// Individual query vectors kept in whatever capacity the centroids leave
/// free, evicted least-recently-used first. Lookups are exact scans.
#[derive(Debug, Clone)]
pub struct OverflowRegion {
    unit: Capacity,
    budget: u64,
    used: u64,
    clock: u64,
    next_key: u64,
    entries: HashMap<u64, Entry>,
    recency: BTreeMap<u64, u64>,
}

impl OverflowRegion {
    pub fn new(unit: Capacity, budget: u64) -> Self {
        OverflowRegion {
            unit,
            budget,
            used: 0,
            clock: 0,
            next_key: 0,
            entries: HashMap::new(),
            recency: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn bytes(&self) -> u64 {
        self.entries
            .values()
            .map(|e| super::entry_cost(e.vector.dim(), e.output.len()))
            .sum()
    }

    fn charge(&self, e: &Entry) -> u64 {
        self.unit.charge(e.vector.dim(), e.output.len())
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn set_budget(&mut self, budget: u64) {
        self.budget = budget;
        self.evict_to_fit();
    }

    fn evict_to_fit(&mut self) {
        while self.used > self.budget {
            let Some((_, key)) = self.recency.pop_first() else { break };
            let e = self.entries.remove(&key).expect("recency and entries agree");
            self.used -= self.charge(&e);
        }
    }

    pub fn insert(&mut self, vector: Embedding, output: String) {
        let key = self.next_key;
        self.next_key += 1;
        let t = self.tick();
        let e = Entry { vector, output, last_used: t };
        self.used += self.charge(&e);
        self.entries.insert(key, e);
        self.recency.insert(t, key);
        self.evict_to_fit();
    }

    /// Best entry at or above `theta`, plus the number of vectors scanned.
    /// With `touch`, a hit becomes most recently used.
    pub fn lookup(&mut self, query: &Embedding, theta: f64, touch: bool) -> Result<(Option<(f64, String)>, u64)> {
        let mut best: Option<(f64, u64)> = None;
        for (&k, e) in &self.entries {
            check_dims(e.vector.dim(), query.dim())?;
            let s = dot(e.vector.as_slice(), query.as_slice());
            if best.is_none_or(|(bs, bk)| s > bs || (s == bs && k < bk)) {
                best = Some((s, k));
            }
        }
        let scanned = self.entries.len() as u64;
        let Some((s, k)) = best.filter(|&(s, _)| s >= theta) else {
            return Ok((None, scanned));
        };
        if touch {
            let t = self.tick();
            let e = self.entries.get_mut(&k).expect("present");
            self.recency.remove(&e.last_used);
            e.last_used = t;
            self.recency.insert(t, k);
        }
        Ok((Some((s, self.entries[&k].output.clone())), scanned))
    }

    /// Entries from least to most recently used.
    pub fn entries_lru_order(&self) -> Vec<(Embedding, String)> {
        self.recency
            .values()
            .map(|k| {
                let e = &self.entries[k];
                (e.vector.clone(), e.output.clone())
            })
            .collect()
    }
}
