//! Hit ratio of every cache mode on one skewed workload, then a capacity
//! sweep written as CSV.

use centroid_cache::corpus::PlantedSpec;
use centroid_cache::sim::{
    experiment_sweeps, run_simulation_detailed, sweep_csv, MockLlmConfig, Mode, Prepared, QuerySource,
    RepeatConfig, Sweep, SystemConfig, TokenHistogram, WorkloadSpec, POLICY_MODES,
};

fn main() -> centroid_cache::Result<()> {
    let spec = WorkloadSpec {
        rps: 20.0,
        duration: 200.0,
        source: QuerySource::Planted(PlantedSpec {
            n_clusters: 300,
            per_cluster: 10,
            intra_sim: 0.86,
            intra_sim_jitter: 0.03,
            zipf_s: 1.0,
            dim: 64,
            seed: 1,
            ..Default::default()
        }),
        seed: 1,
        ..Default::default()
    };
    let base = SystemConfig {
        theta_c: 0.82,
        llm: MockLlmConfig {
            ttft: 0.05,
            tbt: 0.002,
            output_tokens: TokenHistogram::degenerate(100)?,
            servers: 64,
            ..Default::default()
        },
        repeat: RepeatConfig { enabled: false, ..Default::default() },
        ..Default::default()
    };

    let prep = Prepared::new(&spec.source, spec.seed)?;
    for mode in POLICY_MODES {
        let out = run_simulation_detailed(&spec, &SystemConfig { mode, ..base.clone() }, &prep)?;
        println!("{:>14}  hit ratio {:.3}", mode.name(), out.report.hit_ratio);
    }

    let sweep: Sweep = "capacity:0.05,0.1,0.2,0.4".parse()?;
    let rows = experiment_sweeps(&spec, &base, &sweep, &[Mode::SisoNodta, Mode::GptcacheLru])?;
    print!("\n{}", sweep_csv(&rows));
    Ok(())
}
