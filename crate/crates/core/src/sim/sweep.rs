use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::engine::{run_simulation_detailed, Mode, SystemConfig};
use super::workload::{Prepared, WorkloadSpec};
use crate::error::{invalid, Error, Result};

/// One experiment axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "lowercase")]
pub enum Sweep {
    Rps(Vec<f64>),
    Cv(Vec<f64>),
    /// Capacity as a fraction of the history log.
    Capacity(Vec<f64>),
    /// Replacement policies compared at the base capacity.
    Policy(Vec<Mode>),
}

pub const POLICY_MODES: [Mode; 5] = [Mode::SisoNodta, Mode::GptcacheLru, Mode::Lfu, Mode::Fifo, Mode::Rr];
const DEFAULT_POINTS: usize = 10;

impl Sweep {
    pub fn axis(&self) -> &'static str {
        match self {
            Sweep::Rps(_) => "rps",
            Sweep::Cv(_) => "cv",
            Sweep::Capacity(_) => "capacity",
            Sweep::Policy(_) => "policy",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sweep::Rps(v) | Sweep::Cv(v) | Sweep::Capacity(v) => v.len(),
            Sweep::Policy(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `a..b` (ten evenly spaced points), `a..b:step`, or `a,b,c`.
fn parse_values(s: &str) -> Result<Vec<f64>> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| invalid(format!("bad number {t:?} in sweep")));
    let values = if let Some((lo, rest)) = s.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((hi, step)) => (num(hi)?, Some(num(step)?)),
            None => (num(rest)?, None),
        };
        let lo = num(lo)?;
        if !(hi >= lo) {
            return Err(invalid(format!("empty sweep range {s:?}")));
        }
        match step {
            Some(step) if step > 0.0 => {
                let n = ((hi - lo) / step + 1e-9).floor() as usize;
                (0..=n).map(|i| lo + step * i as f64).collect()
            }
            Some(_) => return Err(invalid("sweep step must be positive")),
            None if hi == lo => vec![lo],
            None => (0..DEFAULT_POINTS).map(|i| lo + (hi - lo) * i as f64 / (DEFAULT_POINTS - 1) as f64).collect(),
        }
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(invalid(format!("sweep values must be positive: {s:?}")));
    }
    Ok(values)
}

impl FromStr for Sweep {
    type Err = Error;

    /// `rps:1..30`, `cv:2..10:2`, `capacity:0.02,0.06,0.1`, `policy:all`.
    fn from_str(s: &str) -> Result<Self> {
        let (axis, spec) = s.split_once(':').ok_or_else(|| invalid(format!("sweep {s:?} lacks an axis prefix")))?;
        match axis {
            "rps" => Ok(Sweep::Rps(parse_values(spec)?)),
            "cv" => Ok(Sweep::Cv(parse_values(spec)?)),
            "capacity" => {
                let v = parse_values(spec)?;
                if v.iter().any(|&c| c > 1.0) {
                    return Err(invalid("capacity fractions must be <= 1"));
                }
                Ok(Sweep::Capacity(v))
            }
            "policy" if spec == "all" => Ok(Sweep::Policy(POLICY_MODES.to_vec())),
            "policy" => Ok(Sweep::Policy(spec.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?)),
            _ => Err(invalid(format!("unknown sweep axis {axis:?} (expected rps, cv, capacity or policy)"))),
        }
    }
}

/// One observation: a sweep point under one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub mode: Mode,
    pub requests: u64,
    pub hit_ratio: f64,
    pub slo_attainment: f64,
    pub mean_latency: f64,
    pub median_latency: f64,
    pub p99_latency: f64,
    pub mean_wait: f64,
    pub mean_distance_computations: f64,
    pub final_theta: f64,
}

pub const SWEEP_HEADER: &str = "axis,value,mode,requests,hit_ratio,slo_attainment,mean_latency,median_latency,p99_latency,mean_wait,mean_distance_computations,final_theta";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3},{:.2}",
            r.axis,
            r.value,
            r.mode,
            r.requests,
            r.hit_ratio,
            r.slo_attainment,
            r.mean_latency,
            r.median_latency,
            r.p99_latency,
            r.mean_wait,
            r.mean_distance_computations,
            r.final_theta,
        );
    }
    out
}

/// Runs every sweep point under every mode (policy sweeps supply their
/// own modes). All runs share the workload seed and the prepared history,
/// and fan out across threads; rows come back in (point, mode) order.
pub fn experiment_sweeps(
    spec: &WorkloadSpec,
    base: &SystemConfig,
    sweep: &Sweep,
    modes: &[Mode],
) -> Result<Vec<SweepRow>> {
    if sweep.is_empty() {
        return Err(invalid("sweep has no points"));
    }
    let prep = Prepared::new(&spec.source, spec.seed)?;
    let mut jobs: Vec<(String, WorkloadSpec, SystemConfig)> = Vec::new();
    let push_modes = |jobs: &mut Vec<_>, value: String, spec: WorkloadSpec, cfg: SystemConfig| {
        for &m in modes {
            jobs.push((value.clone(), spec.clone(), SystemConfig { mode: m, ..cfg.clone() }));
        }
    };
    match sweep {
        Sweep::Rps(v) => {
            for &x in v {
                let s = WorkloadSpec { rps: x, phases: Vec::new(), ..spec.clone() };
                push_modes(&mut jobs, fmt_value(x), s, base.clone());
            }
        }
        Sweep::Cv(v) => {
            for &x in v {
                push_modes(&mut jobs, fmt_value(x), WorkloadSpec { cv: x, ..spec.clone() }, base.clone());
            }
        }
        Sweep::Capacity(v) => {
            for &x in v {
                let cfg = SystemConfig { capacity_frac: x, capacity: None, ..base.clone() };
                push_modes(&mut jobs, fmt_value(x), spec.clone(), cfg);
            }
        }
        Sweep::Policy(ms) => {
            for &m in ms {
                jobs.push((m.name().to_owned(), spec.clone(), SystemConfig { mode: m, ..base.clone() }));
            }
        }
    }
    if jobs.is_empty() {
        return Err(invalid("no modes selected for the sweep"));
    }
    let axis = sweep.axis();
    jobs.par_iter()
        .map(|(value, s, cfg)| {
            let out = run_simulation_detailed(s, cfg, &prep)?;
            let r = &out.report;
            Ok(SweepRow {
                axis: axis.to_owned(),
                value: value.clone(),
                mode: cfg.mode,
                requests: r.requests,
                hit_ratio: r.hit_ratio,
                slo_attainment: r.slo_attainment,
                mean_latency: r.latency.mean,
                median_latency: r.latency.median,
                p99_latency: r.latency.p99,
                mean_wait: r.mean_wait,
                mean_distance_computations: r.distance.mean(),
                final_theta: r.windows.last().map_or(cfg.fixed_theta, |w| w.theta),
            })
        })
        .collect()
}

fn fmt_value(x: f64) -> String {
    let s = format!("{x:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sweeps() {
        assert_eq!("rps:1..3:1".parse::<Sweep>().unwrap(), Sweep::Rps(vec![1.0, 2.0, 3.0]));
        assert_eq!("cv:2,4".parse::<Sweep>().unwrap(), Sweep::Cv(vec![2.0, 4.0]));
        match "capacity:0.02..0.20".parse::<Sweep>().unwrap() {
            Sweep::Capacity(v) => {
                assert_eq!(v.len(), 10);
                assert!((v[9] - 0.2).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!("policy:all".parse::<Sweep>().unwrap(), Sweep::Policy(POLICY_MODES.to_vec()));
        assert_eq!("policy:lru".parse::<Sweep>().is_err(), true);
        assert_eq!("policy:gptcache-lru,rr".parse::<Sweep>().unwrap().len(), 2);
        for bad in ["rps", "rps:", "rps:3..1", "rps:1..5:0", "capacity:0.5..2", "x:1", "rps:-1"] {
            assert!(bad.parse::<Sweep>().is_err(), "{bad}");
        }
    }

    #[test]
    fn formats_values() {
        assert_eq!(fmt_value(0.06), "0.06");
        assert_eq!(fmt_value(8.0), "8");
    }
}
