//! Serving pipeline simulation: workload generation, the request path
//! (embed, repeat check, cache lookup, LLM on miss) and its metrics.
//!
//! [`run_simulation`] advances a virtual clock and is fully deterministic
//! under a seed. [`run_live`] drives the same pipeline in wall-clock time
//! with concurrent workers.

mod backend;
mod engine;
mod live;
mod repeat;
mod sweep;
mod workload;

pub use backend::{
    mock_llm_service_time, Generation, HttpBackend, HttpBackendConfig, LlmBackend, MockBackend, MockLlmConfig,
    TokenHistogram,
};
pub use engine::{
    run_simulation, run_simulation_detailed, CacheCosts, LatencyStats, Mode, RequestRecord, ServedBy, SimOutcome,
    SimReport, SystemConfig, WindowStats,
};
pub use live::{run_live, LiveConfig};
pub use repeat::{detect_repeat, RepeatConfig, RepeatDetector};
pub use sweep::{experiment_sweeps, sweep_csv, Sweep, SweepRow, POLICY_MODES, SWEEP_HEADER};
pub use workload::{generate_arrivals, Phase, Prepared, QuerySource, WorkloadSpec};

pub(crate) use backend::{http_agent, post_json, with_retries};
