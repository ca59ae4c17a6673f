//! Serves a short workload in wall-clock time with worker threads sharing
//! one cache, against a mock LLM that sleeps for its service time.

use std::sync::Arc;

use centroid_cache::corpus::PlantedSpec;
use centroid_cache::sim::{
    run_live, LiveConfig, MockBackend, MockLlmConfig, Mode, Prepared, QuerySource, SystemConfig, TokenHistogram,
    WorkloadSpec,
};

fn main() -> centroid_cache::Result<()> {
    env_logger::init();
    let spec = WorkloadSpec {
        rps: 20.0,
        duration: 60.0,
        source: QuerySource::Planted(PlantedSpec {
            n_clusters: 50,
            per_cluster: 10,
            zipf_s: 1.0,
            dim: 64,
            seed: 2,
            ..Default::default()
        }),
        seed: 2,
        ..Default::default()
    };
    let llm = MockLlmConfig {
        ttft: 0.02,
        tbt: 0.0005,
        output_tokens: TokenHistogram::degenerate(60)?,
        servers: 2,
        ..Default::default()
    };
    let prep = Prepared::new(&spec.source, spec.seed)?;
    // Ten workload seconds pass per wall-clock second.
    let live = LiveConfig { time_scale: 0.1, workers: 8 };
    // The backend sleeps in wall-clock time, so its service times shrink
    // by the same factor to stay at `llm` in workload time.
    let wall_llm = MockLlmConfig { ttft: llm.ttft * live.time_scale, tbt: llm.tbt * live.time_scale, ..llm.clone() };
    for mode in [Mode::SisoNodta, Mode::VllmOnly] {
        let cfg = SystemConfig { mode, llm: llm.clone(), ..Default::default() };
        let backend = Arc::new(MockBackend::new(wall_llm.clone(), 2)?);
        let started = std::time::Instant::now();
        let report = run_live(&spec, &cfg, &prep, backend, live)?;
        println!(
            "{:>10}: {} requests, hit ratio {:.3}, slo ok {:.3}, mean latency {:.3}s ({:.1}s wall)",
            mode.name(),
            report.requests,
            report.hit_ratio,
            report.slo_attainment,
            report.latency.mean,
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
