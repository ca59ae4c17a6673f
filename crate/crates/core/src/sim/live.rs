use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::backend::{mock_llm_service_time, LlmBackend};
use super::engine::{summarize, warm_centroid_cache, Mode, RequestRecord, ServedBy, SimReport, SystemConfig, Tally, WindowStats};
use super::repeat::RepeatDetector;
use super::workload::{generate_arrivals, sub_seed, Prepared, WorkloadSpec};
use crate::cache::SemanticCache;
use crate::controller::{Controller, ThetaHandle, WindowObservation};
use crate::corpus::QueryRecord;
use crate::error::{invalid, Result};
use crate::index::{DistanceHistogram, HitSource};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    /// Wall-clock seconds per workload second.
    pub time_scale: f64,
    pub workers: usize,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig { time_scale: 1.0, workers: 16 }
    }
}

#[derive(Default)]
struct Shared {
    records: Vec<(usize, RequestRecord)>,
    window: Vec<RequestRecord>,
    window_arrivals: u64,
    distance: DistanceHistogram,
    tally: Tally,
    recent: VecDeque<QueryRecord>,
}

/// Serves the workload in wall-clock time against `backend`, with
/// concurrent workers sharing one cache and reading the threshold through
/// the controller's atomic snapshot. Supports `siso`, `siso-nodta` and
/// `vllm-only`.
pub fn run_live(
    spec: &WorkloadSpec,
    cfg: &SystemConfig,
    prep: &Prepared,
    backend: Arc<dyn LlmBackend>,
    live: LiveConfig,
) -> Result<SimReport> {
    spec.validate()?;
    cfg.validate()?;
    if !(cfg.mode.uses_centroids() || cfg.mode == Mode::VllmOnly) {
        return Err(invalid(format!("live mode does not support {}", cfg.mode)));
    }
    if !(live.time_scale > 0.0) || live.workers == 0 {
        return Err(invalid("time_scale must be positive and workers >= 1"));
    }
    let cache = if cfg.mode.uses_centroids() { Some(warm_centroid_cache(cfg, prep)?) } else { None };
    let mut controller = if cfg.mode == Mode::Siso && cfg.frozen_theta.is_none() {
        let l = cfg.llm.mean_service_time();
        Some(Controller::new(cfg.controller.clone(), l, cfg.slo_multiplier * l)?)
    } else {
        None
    };
    let theta = match &controller {
        Some(c) => c.handle(),
        None => ThetaHandle::new(cfg.frozen_theta.unwrap_or(cfg.fixed_theta)),
    };
    let arrivals = generate_arrivals(spec)?;
    let shared = Mutex::new(Shared::default());
    let repeat = Mutex::new(RepeatDetector::new(cfg.repeat));
    let done = AtomicBool::new(false);
    let windows: Mutex<Vec<WindowStats>> = Mutex::new(Vec::new());
    let errors: Mutex<Vec<crate::Error>> = Mutex::new(Vec::new());
    let start = Instant::now();
    let scale = live.time_scale;
    let now = move || start.elapsed().as_secs_f64() / scale;

    let (tx, rx) = mpsc::channel::<usize>();
    let rx = Mutex::new(rx);
    thread::scope(|s| {
        for _ in 0..live.workers {
            s.spawn(|| loop {
                let next = rx.lock().expect("poisoned").recv();
                let Ok(i) = next else { break };
                let arrival = arrivals[i];
                if let Err(e) = serve_one(i, arrival, now, spec.seed, cfg, prep, cache.as_ref(), &theta, &*backend, &repeat, &shared) {
                    errors.lock().expect("poisoned").push(e);
                }
            });
        }

        let ctl = s.spawn(|| {
            let window = cfg.controller.window_seconds;
            let mut k = 0u64;
            while !done.load(Ordering::Acquire) {
                let target = start + Duration::from_secs_f64((k + 1) as f64 * window * scale);
                while Instant::now() < target && !done.load(Ordering::Acquire) {
                    thread::sleep(Duration::from_millis(5).min(target.saturating_duration_since(Instant::now())));
                }
                let (batch, arrivals_in_window, recent) = {
                    let mut sh = shared.lock().expect("poisoned");
                    let recent: Vec<QueryRecord> = sh.recent.iter().cloned().collect();
                    (std::mem::take(&mut sh.window), std::mem::take(&mut sh.window_arrivals), recent)
                };
                let obs = observe(&batch, arrivals_in_window);
                let theta_in_force = theta.get();
                if let (Some(c), Some(cache)) = (controller.as_mut(), cache.as_ref()) {
                    if let Err(e) = c.rebuild_table(cache, &recent, sub_seed(spec.seed, "t2h") ^ k) {
                        errors.lock().expect("poisoned").push(e);
                    }
                    c.tick(obs);
                }
                let n = batch.len() as u64;
                let hits = batch.iter().filter(|r| r.served_by == ServedBy::Cache).count() as u64;
                windows.lock().expect("poisoned").push(WindowStats {
                    index: k,
                    end: (k + 1) as f64 * window,
                    arrivals: arrivals_in_window,
                    completions: n,
                    hits,
                    hit_ratio: (n > 0).then(|| hits as f64 / n as f64),
                    slo_ok_fraction: obs.slo_ok_fraction,
                    mean_wait: obs.mean_wait,
                    theta: theta_in_force,
                });
                k += 1;
            }
        });

        for (i, &t) in arrivals.iter().enumerate() {
            let due = start + Duration::from_secs_f64(t * scale);
            if let Some(d) = due.checked_duration_since(Instant::now()) {
                thread::sleep(d);
            }
            shared.lock().expect("poisoned").window_arrivals += 1;
            if tx.send(i).is_err() {
                break;
            }
        }
        drop(tx);
        while shared.lock().expect("poisoned").records.len() + errors.lock().expect("poisoned").len() < arrivals.len() {
            thread::sleep(Duration::from_millis(5));
        }
        done.store(true, Ordering::Release);
        let _ = ctl.join();
    });

    if let Some(e) = errors.into_inner().expect("poisoned").into_iter().next() {
        return Err(e);
    }
    let mut sh = shared.into_inner().expect("poisoned");
    sh.records.sort_by_key(|r| r.0);
    let records: Vec<RequestRecord> = sh.records.into_iter().map(|r| r.1).collect();
    let mut tally = sh.tally;
    tally.final_centroids = cache.as_ref().map_or(0, |c| c.view().len());
    Ok(summarize(&records, tally, windows.into_inner().expect("poisoned"), sh.distance))
}

fn observe(batch: &[RequestRecord], arrivals: u64) -> WindowObservation {
    let served: Vec<&RequestRecord> = batch.iter().filter(|r| r.served_by != ServedBy::Rejected).collect();
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    WindowObservation {
        arrivals,
        completions: served.len() as u64,
        mean_wait: mean(served.iter().map(|r| r.llm_delay).collect()),
        mean_service: None,
        slo_ok_fraction: (!batch.is_empty())
            .then(|| batch.iter().filter(|r| r.slo_ok).count() as f64 / batch.len() as f64),
    }
}

#[allow(clippy::too_many_arguments)]
fn serve_one(
    i: usize,
    arrival: f64,
    now: impl Fn() -> f64,
    seed: u64,
    cfg: &SystemConfig,
    prep: &Prepared,
    cache: Option<&SemanticCache>,
    theta: &ThetaHandle,
    backend: &dyn LlmBackend,
    repeat: &Mutex<RepeatDetector>,
    shared: &Mutex<Shared>,
) -> Result<()> {
    let q = prep.query(i, seed);
    let emb = q.embedding.clone().ok_or_else(|| invalid(format!("query {} has no embedding", q.id)))?;
    let th = theta.get();
    let mut record = RequestRecord {
        query_id: q.id.clone(),
        cluster: q.cluster,
        arrival_t: arrival,
        dequeue_t: arrival,
        completion_t: arrival,
        served_by: ServedBy::Llm,
        e2e_latency: 0.0,
        slo: 0.0,
        slo_ok: false,
        theta_at_service: th,
        n_tokens: 0,
        repeat: false,
        llm_delay: 0.0,
    };
    let t0 = now().max(arrival);

    if let Some(cache) = cache {
        {
            let mut sh = shared.lock().expect("poisoned");
            sh.recent.push_back(q.clone());
            if sh.recent.len() > cfg.t2h_history {
                sh.recent.pop_front();
            }
        }
        record.repeat = repeat.lock().expect("poisoned").observe(&q.user, &emb, arrival);
        if !record.repeat {
            let r = cache.lookup(&emb, th)?;
            let mut sh = shared.lock().expect("poisoned");
            sh.distance.record(r.distance_computations);
            match r.source {
                Some(HitSource::Centroid) => sh.tally.centroid_hits += 1,
                Some(HitSource::Overflow) => sh.tally.overflow_hits += 1,
                None => {}
            }
            if r.is_hit() {
                drop(sh);
                let t = now();
                record.served_by = ServedBy::Cache;
                record.dequeue_t = t0;
                record.completion_t = t.max(t0);
                record.e2e_latency = record.completion_t - arrival;
                // Cache hits carry no generation, so their bound is the unloaded
                // time of a one-token answer.
                record.slo = cfg.slo_multiplier * cfg.llm.ttft;
                record.slo_ok = record.e2e_latency <= record.slo;
                finish(shared, i, record);
                return Ok(());
            }
        } else {
            shared.lock().expect("poisoned").tally.repeats += 1;
        }
    }

    let enqueued = now().max(t0);
    let g = backend.generate(&q.text)?;
    let t = now().max(enqueued);
    if let Some(cache) = cache {
        cache.insert_overflow(emb, g.text.clone())?;
    }
    record.dequeue_t = enqueued;
    record.completion_t = t;
    record.e2e_latency = t - arrival;
    record.n_tokens = g.n_tokens;
    record.slo = cfg.slo_multiplier * mock_llm_service_time(&cfg.llm, g.n_tokens);
    record.slo_ok = record.e2e_latency <= record.slo;
    record.llm_delay = t - enqueued;
    finish(shared, i, record);
    Ok(())
}

fn finish(shared: &Mutex<Shared>, i: usize, record: RequestRecord) {
    let mut sh = shared.lock().expect("poisoned");
    sh.window.push(record.clone());
    sh.records.push((i, record));
}
