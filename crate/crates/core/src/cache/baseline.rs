//! Individual-vector caches under classic replacement policies, used as
//! comparison points for centroid caching.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::vector::{check_dims, dot, Embedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementPolicy {
    Centroid,
    Lru,
    Lfu,
    Fifo,
    Rr,
}

impl ReplacementPolicy {
    pub const BASELINES: [ReplacementPolicy; 4] =
        [ReplacementPolicy::Lru, ReplacementPolicy::Lfu, ReplacementPolicy::Fifo, ReplacementPolicy::Rr];

    pub fn name(self) -> &'static str {
        match self {
            ReplacementPolicy::Centroid => "centroid",
            ReplacementPolicy::Lru => "lru",
            ReplacementPolicy::Lfu => "lfu",
            ReplacementPolicy::Fifo => "fifo",
            ReplacementPolicy::Rr => "rr",
        }
    }
}

impl fmt::Display for ReplacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReplacementPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "centroid" => ReplacementPolicy::Centroid,
            "lru" => ReplacementPolicy::Lru,
            "lfu" => ReplacementPolicy::Lfu,
            "fifo" => ReplacementPolicy::Fifo,
            "rr" => ReplacementPolicy::Rr,
            _ => return Err(invalid(format!("unknown policy {s:?}"))),
        })
    }
}

/// What happened to a query against a baseline cache.
#[derive(Debug, Clone, Copy)]
pub enum CacheEvent<'a> {
    Hit { key: u64 },
    Miss { key: u64, vector: &'a Embedding, output: &'a str },
}

#[derive(Debug, Clone)]
struct Slot {
    key: u64,
    vector: Embedding,
    output: String,
    inserted: u64,
    last_used: u64,
    freq: u64,
}

#[derive(Debug, Clone)]
pub struct BaselineCache {
    policy: ReplacementPolicy,
    slots: Vec<Option<Slot>>,
    by_key: HashMap<u64, usize>,
    clock: u64,
    cursor: usize,
}

impl BaselineCache {
    /// `seed` positions the round-robin cursor; other policies ignore it.
    pub fn new(policy: ReplacementPolicy, capacity: usize, seed: u64) -> Result<Self> {
        if policy == ReplacementPolicy::Centroid {
            return Err(invalid("centroid caching is not a baseline policy"));
        }
        if capacity == 0 {
            return Err(invalid("baseline capacity must be positive"));
        }
        Ok(BaselineCache {
            policy,
            slots: vec![None; capacity],
            by_key: HashMap::new(),
            clock: 0,
            cursor: (seed % capacity as u64) as usize,
        })
    }

    pub fn policy(&self) -> ReplacementPolicy {
        self.policy
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn contains(&self, key: u64) -> bool {
        self.by_key.contains_key(&key)
    }

    /// Best cached vector at or above `theta`: `(key, similarity, output)`,
    /// ties to the lowest key.
    pub fn lookup(&self, query: &Embedding, theta: f64) -> Result<Option<(u64, f64, &str)>> {
        let mut best: Option<(f64, &Slot)> = None;
        for s in self.slots.iter().flatten() {
            check_dims(s.vector.dim(), query.dim())?;
            let sim = dot(s.vector.as_slice(), query.as_slice());
            if best.is_none_or(|(bs, b)| sim > bs || (sim == bs && s.key < b.key)) {
                best = Some((sim, s));
            }
        }
        Ok(best.filter(|&(s, _)| s >= theta).map(|(s, slot)| (slot.key, s, slot.output.as_str())))
    }

    fn victim(&mut self) -> usize {
        let full = || self.slots.iter().enumerate().map(|(i, s)| (i, s.as_ref().expect("full")));
        match self.policy {
            ReplacementPolicy::Lru => full().min_by_key(|(_, s)| s.last_used).expect("non-empty").0,
            ReplacementPolicy::Lfu => full().min_by_key(|(_, s)| (s.freq, s.last_used)).expect("non-empty").0,
            ReplacementPolicy::Fifo => full().min_by_key(|(_, s)| s.inserted).expect("non-empty").0,
            ReplacementPolicy::Rr => {
                let v = self.cursor;
                self.cursor = (self.cursor + 1) % self.slots.len();
                v
            }
            ReplacementPolicy::Centroid => unreachable!("rejected in new"),
        }
    }

    /// Applies one event and returns the key evicted by it, if any.
    pub fn step(&mut self, event: CacheEvent<'_>) -> Option<u64> {
        self.clock += 1;
        let now = self.clock;
        match event {
            CacheEvent::Hit { key } => {
                if let Some(&i) = self.by_key.get(&key) {
                    let s = self.slots[i].as_mut().expect("mapped");
                    s.last_used = now;
                    s.freq += 1;
                }
                None
            }
            CacheEvent::Miss { key, vector, output } => {
                if let Some(&i) = self.by_key.get(&key) {
                    let s = self.slots[i].as_mut().expect("mapped");
                    s.vector = vector.clone();
                    s.output = output.to_owned();
                    s.last_used = now;
                    s.freq += 1;
                    return None;
                }
                let (slot, evicted) = match self.slots.iter().position(Option::is_none) {
                    Some(free) => (free, None),
                    None => {
                        let v = self.victim();
                        let old = self.slots[v].take().expect("full").key;
                        self.by_key.remove(&old);
                        (v, Some(old))
                    }
                };
                self.slots[slot] = Some(Slot {
                    key,
                    vector: vector.clone(),
                    output: output.to_owned(),
                    inserted: now,
                    last_used: now,
                    freq: 1,
                });
                self.by_key.insert(key, slot);
                evicted
            }
        }
    }
}

pub fn baseline_step(state: &mut BaselineCache, event: CacheEvent<'_>) -> Option<u64> {
    state.step(event)
}
