use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backend::{mock_llm_service_time, MockLlmConfig};
use super::repeat::{RepeatConfig, RepeatDetector};
use super::workload::{generate_arrivals, sub_seed, Prepared, WorkloadSpec};
use crate::cache::{entry_cost, BaselineCache, CacheConfig, CacheEvent, Capacity, ReplacementEvent, ReplacementPolicy, SemanticCache};
use crate::cluster::{build_repository_with, should_recluster, ClusterParams, DEFAULT_MIN_COMMUNITY_SIZE, DEFAULT_RECLUSTER_FRACTION, DEFAULT_THETA_C};
use crate::controller::{Controller, ControllerConfig, TraceRow, WindowObservation, DEFAULT_SLO_MULTIPLIER};
use crate::corpus::QueryRecord;
use crate::error::{invalid, Error, Result};
use crate::index::{DistanceHistogram, HitSource, HnswParams, LevelPolicy};
use crate::util::OrdF64;

/// Serving configuration under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Centroid cache with load-aware threshold control.
    Siso,
    /// Centroid cache at a fixed threshold.
    SisoNodta,
    /// Individual-vector cache under LRU.
    GptcacheLru,
    /// No cache at all.
    VllmOnly,
    Lfu,
    Fifo,
    Rr,
}

impl Mode {
    pub const ALL: [Mode; 7] =
        [Mode::Siso, Mode::SisoNodta, Mode::GptcacheLru, Mode::VllmOnly, Mode::Lfu, Mode::Fifo, Mode::Rr];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Siso => "siso",
            Mode::SisoNodta => "siso-nodta",
            Mode::GptcacheLru => "gptcache-lru",
            Mode::VllmOnly => "vllm-only",
            Mode::Lfu => "lfu",
            Mode::Fifo => "fifo",
            Mode::Rr => "rr",
        }
    }

    pub fn uses_centroids(self) -> bool {
        matches!(self, Mode::Siso | Mode::SisoNodta)
    }

    pub fn baseline_policy(self) -> Option<ReplacementPolicy> {
        match self {
            Mode::GptcacheLru => Some(ReplacementPolicy::Lru),
            Mode::Lfu => Some(ReplacementPolicy::Lfu),
            Mode::Fifo => Some(ReplacementPolicy::Fifo),
            Mode::Rr => Some(ReplacementPolicy::Rr),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown mode {s:?} (expected one of siso, siso-nodta, gptcache-lru, vllm-only, lfu, fifo, rr)")))
    }
}

/// Latency of the cache path, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheCosts {
    pub embed: f64,
    pub search_hit: f64,
    pub search_miss: f64,
}

impl Default for CacheCosts {
    fn default() -> Self {
        CacheCosts { embed: 0.00263, search_hit: 0.01392, search_miss: 0.01616 }
    }
}

impl CacheCosts {
    pub const ZERO: CacheCosts = CacheCosts { embed: 0.0, search_hit: 0.0, search_miss: 0.0 };

    /// Every component multiplied by `f`.
    pub fn scaled(self, f: f64) -> Self {
        CacheCosts { embed: self.embed * f, search_hit: self.search_hit * f, search_miss: self.search_miss * f }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub mode: Mode,
    /// Cache capacity as a fraction of the history log's vector count.
    pub capacity_frac: f64,
    /// Explicit capacity; overrides `capacity_frac`.
    pub capacity: Option<Capacity>,
    pub theta_c: f64,
    pub min_community_size: usize,
    /// Retrieval threshold for every mode except `siso`.
    pub fixed_theta: f64,
    /// Pins the `siso` controller at this threshold.
    pub frozen_theta: Option<f64>,
    pub overflow: bool,
    pub hnsw: HnswParams,
    pub level_policy: LevelPolicy,
    pub llm: MockLlmConfig,
    pub slo_multiplier: f64,
    pub costs: CacheCosts,
    pub controller: ControllerConfig,
    /// Recent queries kept for threshold-to-hit-ratio sampling.
    pub t2h_history: usize,
    pub repeat: RepeatConfig,
    /// Re-cluster once this fraction of the history has arrived anew;
    /// `None` disables re-clustering.
    pub recluster_fraction: Option<f64>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            mode: Mode::Siso,
            capacity_frac: 0.06,
            capacity: None,
            theta_c: DEFAULT_THETA_C,
            min_community_size: DEFAULT_MIN_COMMUNITY_SIZE,
            fixed_theta: 0.86,
            frozen_theta: None,
            overflow: true,
            hnsw: HnswParams::default(),
            level_policy: LevelPolicy::Locality,
            llm: MockLlmConfig::default(),
            slo_multiplier: DEFAULT_SLO_MULTIPLIER,
            costs: CacheCosts::default(),
            controller: ControllerConfig::default(),
            t2h_history: 4000,
            repeat: RepeatConfig::default(),
            recluster_fraction: Some(DEFAULT_RECLUSTER_FRACTION),
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        self.llm.validate()?;
        self.controller.validate()?;
        if !(self.slo_multiplier >= 1.0) {
            return Err(invalid("slo_multiplier must be >= 1"));
        }
        if self.capacity.is_none() && !(self.capacity_frac > 0.0 && self.capacity_frac <= 1.0) {
            return Err(invalid("capacity_frac must be in (0, 1]"));
        }
        if !(-1.0..=1.0).contains(&self.fixed_theta) {
            return Err(invalid("fixed_theta must be a cosine in [-1, 1]"));
        }
        if let Some(f) = self.recluster_fraction {
            if !(f > 0.0) {
                return Err(invalid("recluster_fraction must be positive"));
            }
        }
        Ok(())
    }

    /// Capacity for a history of `history_len` vectors.
    pub fn resolved_capacity(&self, history_len: usize) -> Capacity {
        self.capacity
            .unwrap_or_else(|| Capacity::Entries(((self.capacity_frac * history_len as f64).ceil() as u64).max(1)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServedBy {
    Cache,
    Llm,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub query_id: String,
    pub cluster: Option<u32>,
    pub arrival_t: f64,
    /// When service started: the lookup for hits, the LLM slot for misses.
    pub dequeue_t: f64,
    pub completion_t: f64,
    pub served_by: ServedBy,
    pub e2e_latency: f64,
    pub slo: f64,
    pub slo_ok: bool,
    pub theta_at_service: f64,
    pub n_tokens: u32,
    pub repeat: bool,
    /// LLM queueing plus service time; zero for cache hits.
    pub llm_delay: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub median: f64,
    pub p99: f64,
}

impl LatencyStats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return LatencyStats::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        LatencyStats { mean: v.iter().sum::<f64>() / v.len() as f64, median: q(0.5), p99: q(0.99) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub index: u64,
    pub end: f64,
    pub arrivals: u64,
    pub completions: u64,
    pub hits: u64,
    pub hit_ratio: Option<f64>,
    pub slo_ok_fraction: Option<f64>,
    pub mean_wait: Option<f64>,
    /// Threshold in force at the end of the window.
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub requests: u64,
    pub hits: u64,
    pub misses: u64,
    pub rejections: u64,
    pub repeats: u64,
    pub centroid_hits: u64,
    pub overflow_hits: u64,
    pub hit_ratio: f64,
    pub slo_attainment: f64,
    pub latency: LatencyStats,
    /// Mean LLM queueing plus service time over served requests, hits
    /// counting as zero.
    pub mean_wait: f64,
    /// Mean LLM queueing plus service time over LLM-served requests.
    pub mean_llm_sojourn: f64,
    pub replacements: u64,
    pub final_centroids: usize,
    pub windows: Vec<WindowStats>,
    pub distance: DistanceHistogram,
}

impl SimReport {
    /// Canonical JSON bytes; identical runs yield identical bytes.
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    /// Hex SHA-256 of [`SimReport::to_json`].
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_json()?)))
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: SimReport,
    pub records: Vec<RequestRecord>,
    pub trace: Vec<TraceRow>,
    pub replacements: Vec<ReplacementEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    // Declaration order breaks ties at equal times: completions free
    // servers before new work is admitted, ticks see everything before them.
    LlmDone(usize),
    Complete(usize),
    Tick(u64),
    Arrival(usize),
    Enqueue(usize),
}

type Event = Reverse<(OrdF64, Kind, u64)>;

struct InFlight {
    query: QueryRecord,
    arrival: f64,
    slo: f64,
    service: f64,
    n_tokens: u32,
    theta: f64,
    repeat: bool,
    enqueued: f64,
    started: f64,
}

enum Store {
    None,
    Centroid(SemanticCache),
    Baseline(BaselineCache),
}

struct Engine<'a> {
    cfg: &'a SystemConfig,
    spec: &'a WorkloadSpec,
    prep: &'a Prepared,
    store: Store,
    controller: Option<Controller>,
    theta: f64,
    repeat: RepeatDetector,
    events: BinaryHeap<Event>,
    seq: u64,
    queue: VecDeque<usize>,
    busy: usize,
    inflight: HashMap<usize, InFlight>,
    records: Vec<Option<RequestRecord>>,
    recent: VecDeque<QueryRecord>,
    fresh: Vec<QueryRecord>,
    tokens_rng: ChaCha8Rng,
    distance: DistanceHistogram,
    window_arrivals: u64,
    window_done: Vec<usize>,
    windows: Vec<WindowStats>,
    trace: Vec<TraceRow>,
    replacements: Vec<ReplacementEvent>,
    centroid_hits: u64,
    overflow_hits: u64,
    repeats: u64,
    rebuilds: u64,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SystemConfig, spec: &'a WorkloadSpec, prep: &'a Prepared) -> Result<Self> {
        let capacity = cfg.resolved_capacity(prep.history.len());
        let store = if cfg.mode.uses_centroids() {
            Store::Centroid(warm_centroid_cache(cfg, prep)?)
        } else if let Some(policy) = cfg.mode.baseline_policy() {
            let slots = match capacity {
                Capacity::Entries(n) => n,
                Capacity::Bytes(b) => {
                    let dim = prep.history.first().and_then(|r| r.embedding.as_ref()).map_or(0, |e| e.dim());
                    let out = prep.history.iter().map(|r| r.response.as_ref().map_or(0, String::len)).sum::<usize>()
                        / prep.history.len().max(1);
                    b / entry_cost(dim, out)
                }
            };
            let mut cache = BaselineCache::new(policy, slots.max(1) as usize, spec.seed)?;
            warm_baseline(&mut cache, &prep.history, cfg.fixed_theta)?;
            Store::Baseline(cache)
        } else {
            Store::None
        };

        let controller = if cfg.mode == Mode::Siso && cfg.frozen_theta.is_none() {
            let l = cfg.llm.mean_service_time();
            Some(Controller::new(cfg.controller.clone(), l, cfg.slo_multiplier * l)?)
        } else {
            None
        };
        let theta = match (cfg.mode, cfg.frozen_theta, &controller) {
            (Mode::Siso, Some(t), _) => t,
            (_, _, Some(c)) => c.theta(),
            _ => cfg.fixed_theta,
        };

        Ok(Engine {
            cfg,
            spec,
            prep,
            store,
            controller,
            theta,
            repeat: RepeatDetector::new(cfg.repeat),
            events: BinaryHeap::new(),
            seq: 0,
            queue: VecDeque::new(),
            busy: 0,
            inflight: HashMap::new(),
            records: Vec::new(),
            recent: VecDeque::new(),
            fresh: Vec::new(),
            tokens_rng: ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, "tokens")),
            distance: DistanceHistogram::default(),
            window_arrivals: 0,
            window_done: Vec::new(),
            windows: Vec::new(),
            trace: Vec::new(),
            replacements: Vec::new(),
            centroid_hits: 0,
            overflow_hits: 0,
            repeats: 0,
            rebuilds: 0,
        })
    }

    fn push(&mut self, t: f64, kind: Kind) {
        self.seq += 1;
        self.events.push(Reverse((OrdF64(t), kind, self.seq)));
    }

    fn run(mut self) -> Result<SimOutcome> {
        let arrivals = generate_arrivals(self.spec)?;
        self.records = vec![None; arrivals.len()];
        for (i, &t) in arrivals.iter().enumerate() {
            self.push(t, Kind::Arrival(i));
        }
        let window = self.cfg.controller.window_seconds;
        let horizon = self.spec.total_duration();
        let ticks = (horizon / window).ceil() as u64;
        for k in 1..=ticks {
            self.push(k as f64 * window, Kind::Tick(k - 1));
        }

        while let Some(Reverse((OrdF64(t), kind, _))) = self.events.pop() {
            match kind {
                Kind::Arrival(i) => self.on_arrival(i, arrivals[i])?,
                Kind::Enqueue(i) => self.on_enqueue(i, t),
                Kind::LlmDone(i) => self.on_llm_done(i, t)?,
                Kind::Complete(i) => self.window_done.push(i),
                Kind::Tick(k) => self.on_tick(k, t)?,
            }
        }
        if !self.window_done.is_empty() || self.window_arrivals > 0 {
            let end = self.records.iter().flatten().map(|r| r.completion_t).fold(horizon, f64::max);
            self.close_window(self.windows.len() as u64, end, None);
        }
        self.finish()
    }

    fn on_arrival(&mut self, i: usize, t: f64) -> Result<()> {
        self.window_arrivals += 1;
        let query = self.prep.query(i, self.spec.seed);
        let n_tokens = self.cfg.llm.output_tokens.sample(&mut self.tokens_rng);
        let service = mock_llm_service_time(&self.cfg.llm, n_tokens);
        let slo = self.cfg.slo_multiplier * service;
        let emb = query.embedding.clone().ok_or_else(|| invalid(format!("query {} has no embedding", query.id)))?;

        if self.cfg.mode != Mode::VllmOnly {
            if self.controller.is_some() {
                self.recent.push_back(query.clone());
                if self.recent.len() > self.cfg.t2h_history {
                    self.recent.pop_front();
                }
            }
            if self.cfg.mode.uses_centroids() && self.cfg.recluster_fraction.is_some() {
                self.fresh.push(query.clone());
            }
        }

        let theta = self.theta;
        let mut f = InFlight { query, arrival: t, slo, service, n_tokens, theta, repeat: false, enqueued: t, started: t };
        if matches!(self.store, Store::None) {
            self.inflight.insert(i, f);
            self.push(t, Kind::Enqueue(i));
            return Ok(());
        }

        let costs = self.cfg.costs;
        let looked_up = t + costs.embed;
        if self.repeat.observe(&f.query.user, &emb, t) {
            self.repeats += 1;
            f.repeat = true;
            f.enqueued = looked_up;
            self.inflight.insert(i, f);
            self.push(looked_up, Kind::Enqueue(i));
            return Ok(());
        }

        let hit_output = match &mut self.store {
            Store::Centroid(cache) => {
                let r = cache.lookup(&emb, theta)?;
                self.distance.record(r.distance_computations);
                match r.source {
                    Some(HitSource::Centroid) => self.centroid_hits += 1,
                    Some(HitSource::Overflow) => self.overflow_hits += 1,
                    None => {}
                }
                r.is_hit()
            }
            Store::Baseline(cache) => {
                self.distance.record(cache.len() as u64);
                match cache.lookup(&emb, theta)?.map(|h| h.0) {
                    Some(key) => {
                        cache.step(CacheEvent::Hit { key });
                        true
                    }
                    None => false,
                }
            }
            Store::None => unreachable!("handled above"),
        };

        if hit_output {
            let done = looked_up + costs.search_hit;
            let e2e = done - t;
            self.records[i] = Some(RequestRecord {
                query_id: f.query.id.clone(),
                cluster: f.query.cluster,
                arrival_t: t,
                dequeue_t: looked_up,
                completion_t: done,
                served_by: ServedBy::Cache,
                e2e_latency: e2e,
                slo,
                slo_ok: e2e <= slo,
                theta_at_service: theta,
                n_tokens,
                repeat: false,
                llm_delay: 0.0,
            });
            self.push(done, Kind::Complete(i));
        } else {
            let at = looked_up + costs.search_miss;
            f.enqueued = at;
            self.inflight.insert(i, f);
            self.push(at, Kind::Enqueue(i));
        }
        Ok(())
    }

    fn start(&mut self, i: usize, t: f64) {
        let f = self.inflight.get_mut(&i).expect("in flight");
        f.started = t;
        let done = t + f.service;
        self.busy += 1;
        self.push(done, Kind::LlmDone(i));
    }

    fn on_enqueue(&mut self, i: usize, t: f64) {
        if self.busy < self.cfg.llm.servers {
            self.start(i, t);
            return;
        }
        if self.cfg.llm.queue_bound.is_some_and(|b| self.queue.len() >= b) {
            let f = self.inflight.remove(&i).expect("in flight");
            self.records[i] = Some(RequestRecord {
                query_id: f.query.id,
                cluster: f.query.cluster,
                arrival_t: f.arrival,
                dequeue_t: t,
                completion_t: t,
                served_by: ServedBy::Rejected,
                e2e_latency: t - f.arrival,
                slo: f.slo,
                slo_ok: false,
                theta_at_service: f.theta,
                n_tokens: f.n_tokens,
                repeat: f.repeat,
                llm_delay: 0.0,
            });
            self.window_done.push(i);
            return;
        }
        self.queue.push_back(i);
    }

    fn on_llm_done(&mut self, i: usize, t: f64) -> Result<()> {
        self.busy -= 1;
        let f = self.inflight.remove(&i).expect("in flight");
        let e2e = t - f.arrival;
        let output = f.query.response.clone().unwrap_or_else(|| format!("generated for {}", f.query.id));
        match &mut self.store {
            Store::Centroid(cache) => {
                if let Some(e) = &f.query.embedding {
                    cache.insert_overflow(e.clone(), output)?;
                }
            }
            Store::Baseline(cache) => {
                if let Some(e) = &f.query.embedding {
                    cache.step(CacheEvent::Miss { key: i as u64, vector: e, output: &output });
                }
            }
            Store::None => {}
        }
        self.records[i] = Some(RequestRecord {
            query_id: f.query.id,
            cluster: f.query.cluster,
            arrival_t: f.arrival,
            dequeue_t: f.started,
            completion_t: t,
            served_by: ServedBy::Llm,
            e2e_latency: e2e,
            slo: f.slo,
            slo_ok: e2e <= f.slo,
            theta_at_service: f.theta,
            n_tokens: f.n_tokens,
            repeat: f.repeat,
            llm_delay: t - f.enqueued,
        });
        self.window_done.push(i);
        if let Some(next) = self.queue.pop_front() {
            self.start(next, t);
        }
        Ok(())
    }

    fn close_window(&mut self, index: u64, end: f64, obs: Option<&mut WindowObservation>) {
        let done: Vec<&RequestRecord> =
            self.window_done.iter().map(|&i| self.records[i].as_ref().expect("completed")).collect();
        let served: Vec<&&RequestRecord> = done.iter().filter(|r| r.served_by != ServedBy::Rejected).collect();
        let hits = done.iter().filter(|r| r.served_by == ServedBy::Cache).count() as u64;
        let n = done.len() as u64;
        let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let mean_wait = mean(served.iter().map(|r| r.llm_delay).collect());
        let slo_ok = (n > 0).then(|| done.iter().filter(|r| r.slo_ok).count() as f64 / n as f64);
        if let Some(obs) = obs {
            obs.arrivals = self.window_arrivals;
            obs.completions = served.len() as u64;
            obs.mean_wait = mean_wait;
            obs.mean_service = mean(
                done.iter()
                    .filter(|r| r.served_by == ServedBy::Llm)
                    .map(|r| r.completion_t - r.dequeue_t)
                    .collect(),
            );
            obs.slo_ok_fraction = slo_ok;
        }
        self.windows.push(WindowStats {
            index,
            end,
            arrivals: self.window_arrivals,
            completions: n,
            hits,
            hit_ratio: (n > 0).then(|| hits as f64 / n as f64),
            slo_ok_fraction: slo_ok,
            mean_wait,
            theta: self.theta,
        });
        self.window_arrivals = 0;
        self.window_done.clear();
    }

    fn on_tick(&mut self, k: u64, t: f64) -> Result<()> {
        self.maybe_recluster(t)?;
        let mut obs = WindowObservation::default();
        if let (Some(ctl), Store::Centroid(cache)) = (&mut self.controller, &self.store) {
            let recent: Vec<QueryRecord> = self.recent.iter().cloned().collect();
            ctl.rebuild_table(cache, &recent, sub_seed(self.spec.seed, "t2h") ^ self.rebuilds)?;
            self.rebuilds += 1;
        }
        // Window statistics describe the threshold that was in force.
        self.close_window(k, t, Some(&mut obs));
        if let Some(ctl) = &mut self.controller {
            let row = ctl.tick(obs);
            self.theta = row.theta_r;
            self.trace.push(row);
        }
        Ok(())
    }

    fn maybe_recluster(&mut self, t: f64) -> Result<()> {
        let (Some(frac), Store::Centroid(cache)) = (self.cfg.recluster_fraction, &self.store) else {
            return Ok(());
        };
        let base = self.prep.history.len().max(1);
        if self.fresh.is_empty() || !should_recluster(self.fresh.len(), base, frac) {
            return Ok(());
        }
        let params = ClusterParams {
            theta_c: self.cfg.theta_c,
            min_community_size: self.cfg.min_community_size,
            id_base: (self.replacements.len() as u64 + 1) << 32,
            built_at: t,
        };
        let repo = build_repository_with(&self.fresh, &params)?;
        let ev = cache.run_replacement(&repo)?;
        log::debug!("re-clustered {} queries at t={t:.1}: {ev:?}", self.fresh.len());
        self.replacements.push(ev);
        self.fresh.clear();
        Ok(())
    }

    fn finish(self) -> Result<SimOutcome> {
        let records: Vec<RequestRecord> = self
            .records
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| invalid(format!("request {i} never completed"))))
            .collect::<Result<_>>()?;
        let final_centroids = match &self.store {
            Store::Centroid(c) => c.view().len(),
            _ => 0,
        };
        let tally = Tally {
            repeats: self.repeats,
            centroid_hits: self.centroid_hits,
            overflow_hits: self.overflow_hits,
            replacements: self.replacements.len() as u64,
            final_centroids,
        };
        let report = summarize(&records, tally, self.windows, self.distance);
        Ok(SimOutcome { report, records, trace: self.trace, replacements: self.replacements })
    }
}

/// Run-level counters that are not derivable from request records.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Tally {
    pub repeats: u64,
    pub centroid_hits: u64,
    pub overflow_hits: u64,
    pub replacements: u64,
    pub final_centroids: usize,
}

pub(crate) fn summarize(
    records: &[RequestRecord],
    tally: Tally,
    windows: Vec<WindowStats>,
    distance: DistanceHistogram,
) -> SimReport {
    let requests = records.len() as u64;
    let count = |s: ServedBy| records.iter().filter(|r| r.served_by == s).count() as u64;
    let (hits, misses, rejections) = (count(ServedBy::Cache), count(ServedBy::Llm), count(ServedBy::Rejected));
    let served: Vec<&RequestRecord> = records.iter().filter(|r| r.served_by != ServedBy::Rejected).collect();
    let llm: Vec<f64> = records.iter().filter(|r| r.served_by == ServedBy::Llm).map(|r| r.llm_delay).collect();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    SimReport {
        requests,
        hits,
        misses,
        rejections,
        repeats: tally.repeats,
        centroid_hits: tally.centroid_hits,
        overflow_hits: tally.overflow_hits,
        hit_ratio: ratio(hits, requests),
        slo_attainment: ratio(records.iter().filter(|r| r.slo_ok).count() as u64, requests),
        latency: LatencyStats::of(&served.iter().map(|r| r.e2e_latency).collect::<Vec<_>>()),
        mean_wait: mean(&served.iter().map(|r| r.llm_delay).collect::<Vec<_>>()),
        mean_llm_sojourn: mean(&llm),
        replacements: tally.replacements,
        final_centroids: tally.final_centroids,
        windows,
        distance,
    }
}

/// A centroid cache loaded from a clustering of the history.
pub(crate) fn warm_centroid_cache(cfg: &SystemConfig, prep: &Prepared) -> Result<SemanticCache> {
    let cache = SemanticCache::new(CacheConfig {
        capacity: cfg.resolved_capacity(prep.history.len()),
        theta_c: cfg.theta_c,
        overflow: cfg.overflow,
        hnsw: cfg.hnsw,
        level_policy: cfg.level_policy,
        ..CacheConfig::default()
    })?;
    if !prep.history.is_empty() {
        let params = ClusterParams { theta_c: cfg.theta_c, min_community_size: cfg.min_community_size, ..Default::default() };
        cache.run_replacement(&build_repository_with(&prep.history, &params)?)?;
    }
    Ok(cache)
}

/// Replays the history through a baseline cache so it starts warm.
fn warm_baseline(cache: &mut BaselineCache, history: &[QueryRecord], theta: f64) -> Result<()> {
    for (k, r) in history.iter().enumerate() {
        let Some(e) = &r.embedding else { continue };
        match cache.lookup(e, theta)?.map(|h| h.0) {
            Some(key) => {
                cache.step(CacheEvent::Hit { key });
            }
            None => {
                let out = r.response.clone().unwrap_or_default();
                cache.step(CacheEvent::Miss { key: (1 << 40) + k as u64, vector: e, output: &out });
            }
        }
    }
    Ok(())
}

/// Runs one simulation and keeps every artefact.
pub fn run_simulation_detailed(spec: &WorkloadSpec, cfg: &SystemConfig, prep: &Prepared) -> Result<SimOutcome> {
    spec.validate()?;
    cfg.validate()?;
    Engine::new(cfg, spec, prep)?.run()
}

pub fn run_simulation(spec: &WorkloadSpec, cfg: &SystemConfig) -> Result<SimReport> {
    let prep = Prepared::new(&spec.source, spec.seed)?;
    Ok(run_simulation_detailed(spec, cfg, &prep)?.report)
}
