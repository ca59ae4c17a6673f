//! Drives an overload ramp through the simulator and compares adaptive
//! thresholds with a fixed one and with no cache at all.

use centroid_cache::controller::ControllerConfig;
use centroid_cache::corpus::PlantedSpec;
use centroid_cache::sim::{
    run_simulation_detailed, CacheCosts, MockLlmConfig, Mode, Phase, Prepared, QuerySource, RepeatConfig,
    SystemConfig, TokenHistogram, WorkloadSpec,
};

fn main() -> centroid_cache::Result<()> {
    let l = 0.1;
    let mu = 1.0 / l;
    let phases: Vec<Phase> = [(0.3, 120.0), (0.9, 60.0), (1.5, 240.0)]
        .into_iter()
        .map(|(rho, duration)| Phase { duration, rps: rho * mu })
        .collect();
    let spec = WorkloadSpec {
        phases,
        source: QuerySource::Planted(PlantedSpec {
            n_clusters: 1000,
            per_cluster: 5,
            intra_sim: 0.86,
            intra_sim_jitter: 0.02,
            families: 100,
            family_sim: 0.75,
            dim: 64,
            seed: 1,
            ..Default::default()
        }),
        seed: 1,
        ..Default::default()
    };
    let llm = MockLlmConfig {
        ttft: 0.3 * l,
        tbt: 0.7 * l / 100.0,
        output_tokens: TokenHistogram::degenerate(100)?,
        servers: 1,
        ..Default::default()
    };
    let prep = Prepared::new(&spec.source, spec.seed)?;
    println!("{:>12} {:>8} {:>8} {:>10}", "mode", "hit", "slo ok", "p99 (s)");
    for mode in [Mode::Siso, Mode::SisoNodta, Mode::VllmOnly] {
        let cfg = SystemConfig {
            mode,
            llm: llm.clone(),
            costs: CacheCosts::default().scaled(l),
            controller: ControllerConfig { window_seconds: 30.0, ..Default::default() },
            repeat: RepeatConfig { enabled: false, ..Default::default() },
            ..Default::default()
        };
        let out = run_simulation_detailed(&spec, &cfg, &prep)?;
        let r = &out.report;
        println!("{:>12} {:>8.3} {:>8.3} {:>10.3}", mode.name(), r.hit_ratio, r.slo_attainment, r.latency.p99);
        if mode == Mode::Siso {
            let thetas: Vec<String> = out.trace.iter().map(|t| format!("{:.2}", t.theta_r)).collect();
            println!("{:>12} thresholds per window: {}", "", thetas.join(" "));
        }
    }
    Ok(())
}
