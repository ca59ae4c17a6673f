//! Load-aware retrieval threshold control.
//!
//! The LLM is modelled as a single deterministic server fed by Poisson
//! arrivals. Cache hits remove their share of service time, so a lower
//! threshold buys a shorter queue at the cost of response quality. The
//! controller picks the highest threshold whose predicted wait stays under
//! the latency target, then nudges it when observed waits disagree with
//! the prediction.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::SemanticCache;
use crate::corpus::QueryRecord;
use crate::error::{invalid, Result};

pub const THETA_MAX: f64 = 0.98;
pub const THETA_MIN: f64 = 0.60;
pub const GRID_STEP: f64 = 0.02;
pub const DEFAULT_SAMPLE_FRACTION: f64 = 0.05;
pub const DEFAULT_WINDOW_SECONDS: f64 = 10.0;
pub const DEFAULT_LAMBDA_ALPHA: f64 = 0.5;
pub const DEFAULT_FEEDBACK_TOLERANCE: f64 = 0.10;
pub const DEFAULT_SLO_MULTIPLIER: f64 = 1.3;

/// Mean time in system for an M/D/1 queue with arrival rate `lambda` and
/// service time `e`. Returns `f64::INFINITY` once the queue is unstable.
pub fn md1_wait(lambda: f64, e: f64) -> f64 {
    let rho = lambda * e;
    if rho >= 1.0 {
        return f64::INFINITY;
    }
    e + lambda * e * e / (2.0 * (1.0 - rho))
}

/// Mean wait when a fraction `h` of requests is answered by the cache at
/// no cost and the rest take `l` seconds each.
pub fn estimate_wait(lambda: f64, l: f64, h: f64) -> f64 {
    if h >= 1.0 {
        return 0.0;
    }
    md1_wait(lambda, l * (1.0 - h))
}

/// Thresholds from `THETA_MAX` down to `THETA_MIN` in `GRID_STEP` steps.
pub fn default_grid() -> Vec<f64> {
    let top = (THETA_MAX * 100.0).round() as i64;
    let bottom = (THETA_MIN * 100.0).round() as i64;
    let step = (GRID_STEP * 100.0).round() as i64;
    (0..)
        .map(|i| top - i * step)
        .take_while(|&t| t >= bottom)
        .map(|t| t as f64 / 100.0)
        .collect()
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(invalid("threshold grid is empty"));
    }
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(invalid("threshold grid has a non-finite entry"));
    }
    if grid.windows(2).any(|w| w[0] <= w[1]) {
        return Err(invalid("threshold grid must be strictly decreasing"));
    }
    Ok(())
}

/// Least-squares non-decreasing fit (pool adjacent violators, equal weights).
pub fn isotonic_non_decreasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b_mean, b_n) = blocks[blocks.len() - 1];
            let (a_mean, a_n) = blocks[blocks.len() - 2];
            if a_mean <= b_mean {
                break;
            }
            blocks.pop();
            let n = a_n + b_n;
            *blocks.last_mut().expect("two blocks") = ((a_mean * a_n as f64 + b_mean * b_n as f64) / n as f64, n);
        }
    }
    blocks.into_iter().flat_map(|(m, n)| std::iter::repeat_n(m, n)).collect()
}

/// Threshold-to-hit-ratio table, ordered by decreasing threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2HTable {
    pub entries: Vec<(f64, f64)>,
    pub built_at_epoch: u64,
    pub sample_count: usize,
}

impl T2HTable {
    /// Builds a table from raw hit ratios, applying isotonic correction so
    /// that h never decreases as the threshold falls.
    pub fn from_raw(grid: &[f64], raw: &[f64], built_at_epoch: u64, sample_count: usize) -> Result<Self> {
        validate_grid(grid)?;
        if grid.len() != raw.len() {
            return Err(invalid("grid and hit ratios differ in length"));
        }
        if raw.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return Err(invalid("hit ratios must lie in [0, 1]"));
        }
        let fitted = isotonic_non_decreasing(raw);
        Ok(T2HTable {
            entries: grid.iter().copied().zip(fitted.into_iter().map(|h| h.clamp(0.0, 1.0))).collect(),
            built_at_epoch,
            sample_count,
        })
    }

    /// A table with h = 0 everywhere.
    pub fn zeros(grid: &[f64], built_at_epoch: u64) -> Result<Self> {
        Self::from_raw(grid, &vec![0.0; grid.len()], built_at_epoch, 0)
    }

    pub fn thetas(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    /// Hit ratio at the grid point closest to `theta`.
    pub fn hit_ratio(&self, theta: f64) -> f64 {
        self.entries
            .iter()
            .min_by(|a, b| (a.0 - theta).abs().total_cmp(&(b.0 - theta).abs()))
            .map_or(0.0, |e| e.1)
    }

    /// Position of the grid point closest to `theta`.
    pub fn position(&self, theta: f64) -> usize {
        self.entries
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 .0 - theta).abs().total_cmp(&(b.1 .0 - theta).abs()))
            .map_or(0, |(i, _)| i)
    }
}

/// Samples `ceil(fraction * n)` of `recent` and measures, for every grid
/// threshold, the fraction that would hit the cache. Lookups are probes and
/// do not disturb access counts or recency.
pub fn build_t2h(
    cache: &SemanticCache,
    recent: &[QueryRecord],
    fraction: f64,
    grid: &[f64],
    seed: u64,
) -> Result<T2HTable> {
    validate_grid(grid)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("sample fraction {fraction} outside (0, 1]")));
    }
    let epoch = cache.epoch();
    let n = recent.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    if k == 0 {
        log::warn!("no queries to sample; hit ratio table defaults to zero");
        return T2HTable::zeros(grid, epoch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<&QueryRecord> = sample(&mut rng, n, k).into_iter().map(|i| &recent[i]).collect();
    if let Some(q) = picked.iter().find(|q| q.embedding.is_none()) {
        return Err(invalid(format!("query {} has no embedding", q.id)));
    }

    let hits: Vec<Vec<bool>> = picked
        .par_iter()
        .map(|q| {
            let e = q.embedding.as_ref().expect("checked above");
            grid.iter().map(|&t| cache.probe(e, t).map(|r| r.is_hit())).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let raw: Vec<f64> = (0..grid.len())
        .map(|j| hits.iter().filter(|row| row[j]).count() as f64 / k as f64)
        .collect();
    T2HTable::from_raw(grid, &raw, epoch, k)
}

/// Highest grid threshold whose estimated wait is below `s`; the lowest
/// grid threshold when none qualifies.
pub fn choose_theta(table: &T2HTable, lambda: f64, l: f64, s: f64) -> f64 {
    table.entries[choose_position(table, lambda, l, s)].0
}

fn choose_position(table: &T2HTable, lambda: f64, l: f64, s: f64) -> usize {
    table
        .entries
        .iter()
        .position(|&(_, h)| estimate_wait(lambda, l, h) < s)
        .unwrap_or(table.entries.len().saturating_sub(1))
}

/// Moves `theta` one or more grid steps when the observed wait misses the
/// estimate by more than `tolerance` (relative): down when slower than
/// predicted, up when faster. Thresholds off the grid snap to the nearest
/// grid point first.
pub fn feedback_adjust(theta: f64, w_est: f64, w_actual: f64, grid: &[f64], tolerance: f64, steps: usize) -> f64 {
    let Some(i) = grid_position(grid, theta) else { return theta };
    if !(w_est.is_finite() && w_est > 0.0 && w_actual.is_finite()) {
        return theta;
    }
    let err = (w_actual - w_est) / w_est;
    if err.abs() <= tolerance {
        return theta;
    }
    let j = if err > 0.0 {
        (i + steps).min(grid.len() - 1)
    } else {
        i.saturating_sub(steps)
    };
    grid[j]
}

fn grid_position(grid: &[f64], theta: f64) -> Option<usize> {
    grid.iter()
        .enumerate()
        .min_by(|a, b| (a.1 - theta).abs().total_cmp(&(b.1 - theta).abs()))
        .map(|(i, _)| i)
}

/// Latency target derived from the unloaded end-to-end time of a request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SloConfig {
    pub slo_multiplier: f64,
    /// Time to first token, seconds.
    pub ttft: f64,
    /// Time between tokens, seconds per token.
    pub tbt: f64,
}

impl Default for SloConfig {
    fn default() -> Self {
        SloConfig { slo_multiplier: DEFAULT_SLO_MULTIPLIER, ttft: 0.05, tbt: 0.01 }
    }
}

impl SloConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.slo_multiplier >= 1.0) {
            return Err(invalid("slo_multiplier must be >= 1"));
        }
        if !(self.ttft >= 0.0 && self.tbt >= 0.0) {
            return Err(invalid("ttft and tbt must be non-negative"));
        }
        Ok(())
    }

    /// End-to-end time of an unloaded request generating `n_tokens`.
    pub fn unloaded_e2e(&self, n_tokens: u32) -> f64 {
        self.ttft + self.tbt * n_tokens.saturating_sub(1) as f64
    }

    pub fn slo_for(&self, n_tokens: u32) -> f64 {
        self.slo_multiplier * self.unloaded_e2e(n_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub window_seconds: f64,
    pub lambda_alpha: f64,
    pub feedback: bool,
    pub feedback_tolerance: f64,
    pub feedback_steps: usize,
    /// Windows with fewer completions than this skip the feedback step.
    pub feedback_min_samples: u64,
    pub sample_fraction: f64,
    pub grid: Vec<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            window_seconds: DEFAULT_WINDOW_SECONDS,
            lambda_alpha: DEFAULT_LAMBDA_ALPHA,
            feedback: true,
            feedback_tolerance: DEFAULT_FEEDBACK_TOLERANCE,
            feedback_steps: 1,
            feedback_min_samples: 20,
            sample_fraction: DEFAULT_SAMPLE_FRACTION,
            grid: default_grid(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.grid)?;
        if !(self.window_seconds > 0.0) {
            return Err(invalid("window_seconds must be positive"));
        }
        if !(self.lambda_alpha > 0.0 && self.lambda_alpha <= 1.0) {
            return Err(invalid("lambda_alpha must be in (0, 1]"));
        }
        if !(self.feedback_tolerance >= 0.0) {
            return Err(invalid("feedback_tolerance must be non-negative"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(invalid("sample_fraction must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub lambda_hat: f64,
    /// Mean LLM serving time, seconds.
    pub l: f64,
    /// Latency target, seconds.
    pub s: f64,
    pub theta_r: f64,
    pub last_w_estimate: f64,
    pub window_seconds: f64,
    pub windows_seen: u64,
}

/// EWMA update of the arrival rate from one window's arrival count. The
/// first window sets the estimate directly.
pub fn update_lambda(state: &mut ControllerState, arrivals_in_window: u64, alpha: f64) -> f64 {
    let rate = arrivals_in_window as f64 / state.window_seconds;
    state.lambda_hat = if state.windows_seen == 0 {
        rate
    } else {
        alpha * rate + (1.0 - alpha) * state.lambda_hat
    };
    state.windows_seen += 1;
    state.lambda_hat
}

/// Cheap cloneable reader of the current retrieval threshold.
#[derive(Debug, Clone)]
pub struct ThetaHandle(Arc<AtomicU64>);

impl ThetaHandle {
    pub fn new(theta: f64) -> Self {
        ThetaHandle(Arc::new(AtomicU64::new(theta.to_bits())))
    }

    pub fn get(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Acquire))
    }

    fn set(&self, theta: f64) {
        self.0.store(theta.to_bits(), Ordering::Release);
    }
}

/// What the serving side observed during one control window.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WindowObservation {
    pub arrivals: u64,
    pub completions: u64,
    /// Mean queueing plus service delay of requests completed in the window.
    pub mean_wait: Option<f64>,
    /// Mean LLM service time of misses completed in the window.
    pub mean_service: Option<f64>,
    pub slo_ok_fraction: Option<f64>,
}

/// One line of the controller trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: u64,
    pub lambda_hat: f64,
    pub l: f64,
    pub h_used: f64,
    pub theta_r: f64,
    pub w_est: f64,
    pub w_actual: Option<f64>,
    pub slo_ok_fraction: Option<f64>,
}

pub const TRACE_HEADER: &str = "tick,lambda_hat,L,h_used,theta_r,W_est,W_actual,slo_ok_fraction";

fn csv_num(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let opt = |v: Option<f64>| v.map(csv_num).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.tick,
            csv_num(r.lambda_hat),
            csv_num(r.l),
            csv_num(r.h_used),
            csv_num(r.theta_r),
            csv_num(r.w_est),
            opt(r.w_actual),
            opt(r.slo_ok_fraction),
        );
    }
    out
}

/// Periodic threshold controller. Owned by one task; the serving path
/// reads the threshold through [`ThetaHandle`].
///
/// Each tick re-derives the base threshold from the table and the current
/// load, then applies a persistent feedback offset (in grid steps) that
/// accumulates while observed waits disagree with the model.
#[derive(Debug)]
pub struct Controller {
    config: ControllerConfig,
    state: ControllerState,
    table: Arc<T2HTable>,
    theta: ThetaHandle,
    offset: i64,
    tick: u64,
}

impl Controller {
    /// `l` is the unloaded mean serving time and `s` the latency target.
    pub fn new(config: ControllerConfig, l: f64, s: f64) -> Result<Self> {
        config.validate()?;
        if !(l > 0.0 && s > 0.0) {
            return Err(invalid("L and S must be positive"));
        }
        let table = Arc::new(T2HTable::zeros(&config.grid, 0)?);
        let theta = config.grid[0];
        let state = ControllerState {
            lambda_hat: 0.0,
            l,
            s,
            theta_r: theta,
            last_w_estimate: estimate_wait(0.0, l, 0.0),
            window_seconds: config.window_seconds,
            windows_seen: 0,
        };
        Ok(Controller { config, state, table, theta: ThetaHandle::new(theta), offset: 0, tick: 0 })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn theta(&self) -> f64 {
        self.state.theta_r
    }

    pub fn handle(&self) -> ThetaHandle {
        self.theta.clone()
    }

    pub fn table(&self) -> Arc<T2HTable> {
        Arc::clone(&self.table)
    }

    /// Swaps in a freshly built table; takes effect at the next tick.
    pub fn set_table(&mut self, table: T2HTable) -> Result<()> {
        if table.thetas().ne(self.config.grid.iter().copied()) {
            return Err(invalid("table grid differs from the controller grid"));
        }
        self.table = Arc::new(table);
        Ok(())
    }

    pub fn rebuild_table(&mut self, cache: &SemanticCache, recent: &[QueryRecord], seed: u64) -> Result<()> {
        let t = build_t2h(cache, recent, self.config.sample_fraction, &self.config.grid, seed)?;
        self.set_table(t)
    }

    /// Closes one control window and returns its trace row.
    pub fn tick(&mut self, obs: WindowObservation) -> TraceRow {
        update_lambda(&mut self.state, obs.arrivals, self.config.lambda_alpha);
        if let Some(l) = obs.mean_service.filter(|l| *l > 0.0 && l.is_finite()) {
            self.state.l = l;
        }

        // The first window has no estimate of its own to compare against.
        let enough = self.tick > 0 && obs.completions >= self.config.feedback_min_samples;
        if let (true, true, Some(w)) = (self.config.feedback, enough, obs.mean_wait) {
            let grid = &self.config.grid;
            let cur = self.table.position(self.state.theta_r) as i64;
            let moved = feedback_adjust(
                self.state.theta_r,
                self.state.last_w_estimate,
                w,
                grid,
                self.config.feedback_tolerance,
                self.config.feedback_steps,
            );
            self.offset += self.table.position(moved) as i64 - cur;
        }

        let n = self.table.entries.len() as i64;
        self.offset = self.offset.clamp(-(n - 1), n - 1);
        let base = choose_position(&self.table, self.state.lambda_hat, self.state.l, self.state.s) as i64;
        let pos = (base + self.offset).clamp(0, n - 1) as usize;
        let (theta, h) = self.table.entries[pos];
        self.state.theta_r = theta;
        self.state.last_w_estimate = estimate_wait(self.state.lambda_hat, self.state.l, h);
        self.theta.set(theta);

        let row = TraceRow {
            tick: self.tick,
            lambda_hat: self.state.lambda_hat,
            l: self.state.l,
            h_used: h,
            theta_r: theta,
            w_est: self.state.last_w_estimate,
            w_actual: obs.mean_wait,
            slo_ok_fraction: obs.slo_ok_fraction,
        };
        self.tick += 1;
        row
    }
}
