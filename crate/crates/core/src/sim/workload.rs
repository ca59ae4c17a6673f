use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, sort_for_replay, PlantedModel, PlantedSpec, QueryRecord};
use crate::error::{invalid, Result};
use crate::vector::stable_seed;

/// A stretch of constant mean arrival rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub duration: f64,
    pub rps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QuerySource {
    /// Fresh draws from a planted model; its corpus is the historical log.
    Planted(PlantedSpec),
    /// A recorded log. The first `warm_fraction` (by timestamp) is the
    /// history, the rest is replayed in order and cycled if needed.
    Replay { path: PathBuf, warm_fraction: f64, dim: usize },
}

impl Default for QuerySource {
    fn default() -> Self {
        QuerySource::Planted(PlantedSpec { n_clusters: 100, per_cluster: 50, zipf_s: 1.0, ..PlantedSpec::default() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub rps: f64,
    pub cv: f64,
    pub duration: f64,
    /// When non-empty, overrides `rps` and `duration`.
    pub phases: Vec<Phase>,
    pub source: QuerySource,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec { rps: 8.0, cv: 1.0, duration: 600.0, phases: Vec::new(), source: QuerySource::default(), seed: 0 }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cv > 0.0 && self.cv.is_finite()) {
            return Err(invalid("cv must be positive"));
        }
        for p in self.phases() {
            if !(p.rps > 0.0 && p.rps.is_finite()) {
                return Err(invalid("rps must be positive"));
            }
            if !(p.duration > 0.0 && p.duration.is_finite()) {
                return Err(invalid("duration must be positive"));
            }
        }
        match &self.source {
            QuerySource::Planted(p) => p.validate(),
            QuerySource::Replay { warm_fraction, dim, .. } => {
                if !(0.0..1.0).contains(warm_fraction) {
                    return Err(invalid("warm_fraction must be in [0, 1)"));
                }
                if *dim == 0 {
                    return Err(invalid("dim must be positive"));
                }
                Ok(())
            }
        }
    }

    pub fn phases(&self) -> Vec<Phase> {
        if self.phases.is_empty() {
            vec![Phase { duration: self.duration, rps: self.rps }]
        } else {
            self.phases.clone()
        }
    }

    pub fn total_duration(&self) -> f64 {
        self.phases().iter().map(|p| p.duration).sum()
    }

    /// Mean arrival rate in force at time `t`.
    pub fn rate_at(&self, t: f64) -> f64 {
        let mut end = 0.0;
        let phases = self.phases();
        for p in &phases {
            end += p.duration;
            if t < end {
                return p.rps;
            }
        }
        phases.last().map_or(0.0, |p| p.rps)
    }
}

pub(crate) fn sub_seed(seed: u64, stream: &str) -> u64 {
    stable_seed(stream.as_bytes(), seed)
}

/// Arrival times of a gamma renewal process with shape `1/cv^2` and mean
/// interarrival `1/rps` (phase by phase). `cv == 1` is a Poisson process.
pub fn generate_arrivals(spec: &WorkloadSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, "arrivals"));
    let shape = 1.0 / (spec.cv * spec.cv);
    let mut out = Vec::new();
    let mut start = 0.0;
    let mut t: f64 = 0.0;
    for p in spec.phases() {
        let end = start + p.duration;
        let gamma = Gamma::new(shape, 1.0 / (p.rps * shape)).map_err(|e| invalid(e.to_string()))?;
        t = t.max(start);
        loop {
            t += gamma.sample(&mut rng);
            if t >= end {
                break;
            }
            out.push(t);
        }
        // The pending interarrival gap is redrawn under the next phase's rate.
        t = end;
        start = end;
    }
    Ok(out)
}

/// Materialized query source: the historical log plus a stream of fresh
/// queries for the arrivals.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub history: Vec<QueryRecord>,
    pub model: Option<PlantedModel>,
    replay: Vec<QueryRecord>,
}

impl Prepared {
    pub fn new(source: &QuerySource, seed: u64) -> Result<Self> {
        match source {
            QuerySource::Planted(spec) => {
                let model = PlantedModel::new(spec.clone())?;
                Ok(Prepared { history: model.corpus(), model: Some(model), replay: Vec::new() })
            }
            QuerySource::Replay { path, warm_fraction, dim } => {
                let mut records = read_jsonl(path)?;
                crate::corpus::embed_missing(&mut records, *dim, seed)?;
                for r in &mut records {
                    if r.response.is_none() {
                        r.response = Some(format!("response to {}", r.id));
                    }
                }
                sort_for_replay(&mut records);
                let split = (records.len() as f64 * warm_fraction).floor() as usize;
                let replay = records.split_off(split);
                if replay.is_empty() {
                    return Err(invalid("replay log leaves no queries to stream"));
                }
                Ok(Prepared { history: records, model: None, replay })
            }
        }
    }

    /// The query for the `i`-th arrival. Deterministic in `(seed, i)`.
    pub fn query(&self, i: usize, seed: u64) -> QueryRecord {
        match &self.model {
            Some(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "queries") ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let c = m.sample_cluster(&mut rng);
                m.sample_record(format!("s{i:08}"), c, &mut rng)
            }
            None => {
                let mut r = self.replay[i % self.replay.len()].clone();
                if i >= self.replay.len() {
                    r.id = format!("{}#{}", r.id, i / self.replay.len());
                }
                r
            }
        }
    }

    /// The first `n` streamed queries.
    pub fn stream(&self, n: usize, seed: u64) -> Vec<QueryRecord> {
        (0..n).map(|i| self.query(i, seed)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cv_of(ts: &[f64]) -> f64 {
        let gaps: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
        var.sqrt() / mean
    }

    #[test]
    fn poisson_count() {
        let spec = WorkloadSpec { rps: 8.0, cv: 1.0, duration: 1000.0, ..Default::default() };
        let n = generate_arrivals(&spec).unwrap().len() as f64;
        assert!((n - 8000.0).abs() <= 3.0 * 8000f64.sqrt(), "{n}");
    }

    #[test]
    fn interarrival_cv() {
        let spec = WorkloadSpec { rps: 100.0, cv: 1.0, duration: 1000.0, ..Default::default() };
        let cv = cv_of(&generate_arrivals(&spec).unwrap());
        assert!((0.95..=1.05).contains(&cv), "{cv}");
        let spec = WorkloadSpec { rps: 100.0, cv: 10.0, duration: 1000.0, seed: 1, ..Default::default() };
        let ts = generate_arrivals(&spec).unwrap();
        assert!(ts.len() > 10_000);
        let cv = cv_of(&ts);
        assert!((9.0..=11.0).contains(&cv), "{cv}");
    }

    #[test]
    fn phases_change_rate() {
        let spec = WorkloadSpec {
            phases: vec![Phase { duration: 100.0, rps: 2.0 }, Phase { duration: 100.0, rps: 20.0 }],
            ..Default::default()
        };
        let ts = generate_arrivals(&spec).unwrap();
        let first = ts.iter().filter(|&&t| t < 100.0).count();
        let second = ts.len() - first;
        assert!(first < 300 && second > 1700, "{first} {second}");
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(spec.rate_at(150.0), 20.0);
        assert_eq!(generate_arrivals(&spec).unwrap(), ts);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_arrivals(&WorkloadSpec { rps: 0.0, ..Default::default() }).is_err());
        assert!(generate_arrivals(&WorkloadSpec { cv: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn planted_queries_are_deterministic() {
        let spec = PlantedSpec { n_clusters: 5, per_cluster: 4, dim: 16, ..Default::default() };
        let p = Prepared::new(&QuerySource::Planted(spec), 3).unwrap();
        assert_eq!(p.history.len(), 20);
        assert_eq!(p.query(7, 3), p.query(7, 3));
        assert_ne!(p.query(7, 3).embedding, p.query(8, 3).embedding);
    }
}
