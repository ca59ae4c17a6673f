//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or validation error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cache::{Capacity, CacheConfig, SemanticCache, SemanticCacheState};
use crate::cluster::{build_repository, load_snapshot, save_json_dump, save_snapshot};
use crate::controller::{build_t2h, trace_csv, DEFAULT_SAMPLE_FRACTION};
use crate::corpus::{embed_missing, read_jsonl, PlantedSpec, QueryRecord};
use crate::embed::{fetch_embeddings, EmbedClient, EmbedClientConfig};
use crate::error::{invalid, Error, Result};
use crate::sim::{
    experiment_sweeps, run_live, run_simulation_detailed, sweep_csv, HttpBackend, HttpBackendConfig, LiveConfig,
    LlmBackend, MockBackend, Mode, Prepared, QuerySource, Sweep, SystemConfig, TokenHistogram, WorkloadSpec,
};
use crate::util::write_atomic;

#[derive(Debug, Parser)]
#[command(name = "centroid-cache", version, about = "Centroid-based semantic cache for LLM serving")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster a query log into a centroid repository.
    Cluster(ClusterArgs),
    /// Merge a repository into a saved cache under a capacity limit.
    Replace(ReplaceArgs),
    /// Simulate serving a workload.
    Simulate(SimulateArgs),
    /// Run one simulation per sweep point and mode; writes tidy CSV.
    Sweep(SweepArgs),
    /// Build a threshold-to-hit-ratio table for a saved cache.
    T2h(T2hArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EmbedArgs {
    /// Embedding dimension for records without embeddings [default: that of
    /// the embeddings already in the input, else 768].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Embed missing records through this service instead of the
    /// deterministic synthetic embedder.
    #[arg(long)]
    pub embed_url: Option<String>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Query log, one JSON record per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Cosine threshold for joining a community.
    #[arg(long, default_value_t = crate::cluster::DEFAULT_THETA_C)]
    pub theta_c: f64,
    /// Smallest community kept as a multi-member cluster.
    #[arg(long, default_value_t = crate::cluster::DEFAULT_MIN_COMMUNITY_SIZE)]
    pub min_size: usize,
    /// Repository snapshot to write; a JSON dump goes next to it.
    #[arg(long, default_value = "repo.bin")]
    pub out: PathBuf,
    #[command(flatten)]
    pub embed: EmbedArgs,
    /// Seed for synthetic embeddings.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CapacityArgs {
    /// Cache capacity in bytes; accepts K, M, G suffixes (powers of 1024),
    /// e.g. 64MB.
    #[arg(long, value_parser = parse_bytes, conflicts_with = "capacity_entries")]
    pub capacity: Option<u64>,
    /// Cache capacity in entries.
    #[arg(long)]
    pub capacity_entries: Option<u64>,
}

impl CapacityArgs {
    fn resolve(&self) -> Option<Capacity> {
        self.capacity.map(Capacity::Bytes).or(self.capacity_entries.map(Capacity::Entries))
    }
}

#[derive(Debug, Args)]
pub struct ReplaceArgs {
    /// Cache state (JSON). Created empty when missing.
    #[arg(long)]
    pub cache: PathBuf,
    /// Repository snapshot to merge in.
    #[arg(long)]
    pub repo: PathBuf,
    #[command(flatten)]
    pub capacity: CapacityArgs,
    /// Where to write the new state [default: overwrite --cache].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Append a JSON line describing the replacement to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct WorkloadArgs {
    /// Config file (TOML or JSON) with `workload` and `system` tables;
    /// flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Serving mode: siso, siso-nodta, gptcache-lru, vllm-only, lfu, fifo, rr.
    #[arg(long, default_value = "siso")]
    pub mode: Mode,
    /// Mean arrival rate, requests per second.
    #[arg(long, default_value_t = 8.0)]
    pub rps: f64,
    /// Coefficient of variation of interarrival times (1 = Poisson).
    #[arg(long, default_value_t = 1.0)]
    pub cv: f64,
    /// Workload duration, seconds.
    #[arg(long, default_value_t = 600.0)]
    pub duration: f64,
    /// Cache capacity as a fraction of the history's vector count.
    #[arg(long, default_value_t = 0.06)]
    pub capacity_frac: f64,
    /// SLO as a multiple of each request's unloaded end-to-end latency.
    #[arg(long, default_value_t = crate::controller::DEFAULT_SLO_MULTIPLIER)]
    pub slo_mult: f64,
    /// Retrieval threshold for modes without threshold control.
    #[arg(long, default_value_t = 0.86)]
    pub theta: f64,
    /// Seed for every random choice in the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Planted corpus: number of clusters.
    #[arg(long, default_value_t = 100)]
    pub clusters: usize,
    /// Planted corpus: mean history records per cluster.
    #[arg(long, default_value_t = 50)]
    pub per_cluster: usize,
    /// Planted corpus: expected cosine between members of one cluster.
    #[arg(long, default_value_t = 0.92)]
    pub intra_sim: f64,
    /// Planted corpus: Zipf exponent of cluster popularity.
    #[arg(long, default_value_t = 1.0)]
    pub zipf: f64,
    /// Embedding dimension.
    #[arg(long, default_value_t = crate::vector::DEFAULT_DIM)]
    pub dim: usize,
    /// Replay this JSONL log instead of sampling a planted corpus.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Time to first token, seconds.
    #[arg(long, default_value_t = 0.05)]
    pub ttft: f64,
    /// Time between tokens, seconds.
    #[arg(long, default_value_t = 0.05)]
    pub tbt: f64,
    /// Generated tokens per response (a degenerate histogram).
    #[arg(long, default_value_t = 240, conflicts_with = "token_file")]
    pub tokens: u32,
    /// Token-count histogram, one integer per line.
    #[arg(long)]
    pub token_file: Option<PathBuf>,
    /// Parallel LLM servers.
    #[arg(long, default_value_t = 1)]
    pub servers: usize,
    /// Reject misses when this many already wait for the LLM.
    #[arg(long)]
    pub queue_bound: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// Report JSON output.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Controller trace CSV output.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Serve in wall-clock time instead of virtual time.
    #[arg(long)]
    pub live: bool,
    /// Live mode: LLM service base URL; the mock backend is used when absent.
    #[arg(long, requires = "live")]
    pub backend_url: Option<String>,
    /// Live mode: wall seconds per workload second.
    #[arg(long, default_value_t = 1.0, requires = "live")]
    pub time_scale: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// Axis and points: rps:1..30, cv:2..10:2, capacity:0.02,0.06, policy:all.
    #[arg(long)]
    pub sweep: Sweep,
    /// Comma-separated modes to run at each point (ignored by policy sweeps).
    #[arg(long, value_delimiter = ',', default_value = "siso,siso-nodta,vllm-only")]
    pub modes: Vec<Mode>,
    /// Tidy CSV output.
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct T2hArgs {
    /// Cache state (JSON).
    #[arg(long)]
    pub cache: PathBuf,
    /// Recent queries to sample from (JSONL).
    #[arg(long)]
    pub queries: PathBuf,
    /// Fraction of queries sampled.
    #[arg(long, default_value_t = DEFAULT_SAMPLE_FRACTION)]
    pub sample_frac: f64,
    /// Threshold grid as from:to:step, descending.
    #[arg(long, default_value = "0.98:0.60:0.02", value_parser = parse_grid)]
    pub grid: ::std::vec::Vec<f64>,
    /// Write the table as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub embed: EmbedArgs,
    /// Seed for the query sample.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Config file layout for `simulate` and `sweep`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunFile {
    pub workload: WorkloadSpec,
    pub system: SystemConfig,
}

fn parse_bytes(s: &str) -> std::result::Result<u64, String> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num.parse().map_err(|_| format!("bad byte count {s:?}"))?;
    let mult: u64 = match unit.trim().to_ascii_uppercase().as_str() {
        "" | "B" => 1,
        "K" | "KB" | "KIB" => 1 << 10,
        "M" | "MB" | "MIB" => 1 << 20,
        "G" | "GB" | "GIB" => 1 << 30,
        other => return Err(format!("unknown size unit {other:?}")),
    };
    n.checked_mul(mult).filter(|&b| b > 0).ok_or_else(|| format!("byte count {s:?} out of range"))
}

/// A single-argument parse of `from:to:step` into a descending list.
fn parse_grid(s: &str) -> std::result::Result<Vec<f64>, String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad grid component {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let [hi, lo, step] = parts[..] else { return Err("grid must be from:to:step".into()) };
    if !(step > 0.0 && hi >= lo) {
        return Err("grid needs from >= to and a positive step".into());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((hi - step * i as f64) * 1e6).round() / 1e6).collect())
}

fn load_run_file(path: &Path) -> Result<RunFile> {
    let text = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(serde_json::from_str(&text)?),
        _ => toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display()))),
    }
}

/// Config file values, overridden by flags given on the command line.
fn resolve_run(args: &WorkloadArgs, m: &ArgMatches) -> Result<(WorkloadSpec, SystemConfig)> {
    let RunFile { mut workload, mut system } = match &args.config {
        Some(p) => load_run_file(p)?,
        None => RunFile::default(),
    };
    let given = |id: &str| m.value_source(id) == Some(ValueSource::CommandLine);
    let from_file = args.config.is_some();
    // Without a config file the flag defaults are authoritative.
    let set = |id: &str| given(id) || !from_file;

    if set("mode") {
        system.mode = args.mode;
    }
    if set("rps") {
        workload.rps = args.rps;
    }
    if set("cv") {
        workload.cv = args.cv;
    }
    if set("duration") {
        workload.duration = args.duration;
    }
    if set("seed") {
        workload.seed = args.seed;
    }
    if set("capacity_frac") {
        system.capacity_frac = args.capacity_frac;
    }
    if set("slo_mult") {
        system.slo_multiplier = args.slo_mult;
    }
    if set("theta") {
        system.fixed_theta = args.theta;
    }
    if set("ttft") {
        system.llm.ttft = args.ttft;
    }
    if set("tbt") {
        system.llm.tbt = args.tbt;
    }
    if let Some(p) = &args.token_file {
        system.llm.output_tokens = TokenHistogram::from_file(p)?;
    } else if set("tokens") {
        system.llm.output_tokens = TokenHistogram::degenerate(args.tokens)?;
    }
    if set("servers") {
        system.llm.servers = args.servers;
    }
    if args.queue_bound.is_some() {
        system.llm.queue_bound = args.queue_bound;
    }

    if let Some(path) = &args.replay {
        workload.source = QuerySource::Replay { path: path.clone(), warm_fraction: 0.5, dim: args.dim };
    } else {
        let mut p = match &workload.source {
            QuerySource::Planted(p) => p.clone(),
            QuerySource::Replay { .. } if !from_file => PlantedSpec::default(),
            QuerySource::Replay { .. } => return finish(workload, system),
        };
        if set("clusters") {
            p.n_clusters = args.clusters;
        }
        if set("per_cluster") {
            p.per_cluster = args.per_cluster;
        }
        if set("intra_sim") {
            p.intra_sim = args.intra_sim;
        }
        if set("zipf") {
            p.zipf_s = args.zipf;
        }
        if set("dim") {
            p.dim = args.dim;
        }
        if set("seed") {
            p.seed = args.seed;
        }
        workload.source = QuerySource::Planted(p);
    }
    finish(workload, system)
}

fn finish(workload: WorkloadSpec, system: SystemConfig) -> Result<(WorkloadSpec, SystemConfig)> {
    workload.validate()?;
    system.validate()?;
    Ok((workload, system))
}

fn ensure_embeddings(records: &mut [QueryRecord], embed: &EmbedArgs, seed: u64) -> Result<()> {
    let dim = embed
        .dim
        .or_else(|| records.iter().find_map(|r| r.embedding.as_ref().map(|e| e.dim())))
        .unwrap_or(crate::vector::DEFAULT_DIM);
    match &embed.embed_url {
        None => embed_missing(records, dim, seed),
        Some(url) => {
            let client = EmbedClient::new(EmbedClientConfig { url: url.clone(), dim, ..Default::default() })?;
            let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].embedding.is_none()).collect();
            let texts: Vec<String> = idx.iter().map(|&i| records[i].text.clone()).collect();
            for (i, e) in idx.into_iter().zip(fetch_embeddings(&client, &texts)?) {
                records[i].embedding = Some(e);
            }
            Ok(())
        }
    }
}

fn cmd_cluster(a: &ClusterArgs) -> Result<()> {
    let mut log = read_jsonl(&a.input)?;
    if log.is_empty() {
        log::warn!("{} holds no queries; writing an empty repository", a.input.display());
        eprintln!("warning: {} holds no queries", a.input.display());
    }
    ensure_embeddings(&mut log, &a.embed, a.seed)?;
    for r in &mut log {
        if r.response.is_none() {
            r.response = Some(format!("response to {}", r.id));
        }
    }
    let repo = build_repository(&log, a.theta_c, a.min_size)?;
    save_snapshot(&repo, &a.out)?;
    let dump = a.out.with_extension("json");
    save_json_dump(&repo, &dump)?;
    let singletons = repo.len() - repo.community_count();
    println!(
        "{} queries -> {} communities, {} singletons ({} centroids)",
        log.len(),
        repo.community_count(),
        singletons,
        repo.len()
    );
    println!("cluster size histogram (size: count):");
    for (size, count) in repo.size_histogram() {
        println!("  {size}: {count}");
    }
    println!("wrote {} and {}", a.out.display(), dump.display());
    Ok(())
}

fn cmd_replace(a: &ReplaceArgs) -> Result<()> {
    let repo = load_snapshot(&a.repo)?;
    let capacity = a.capacity.resolve();
    let state = if a.cache.exists() {
        let mut st: SemanticCacheState = serde_json::from_slice(&std::fs::read(&a.cache)?)?;
        if let Some(c) = capacity {
            st.config.capacity = c;
        }
        st
    } else {
        let capacity = capacity.ok_or_else(|| invalid("--capacity or --capacity-entries is required for a new cache"))?;
        log::info!("{} does not exist; starting from an empty cache", a.cache.display());
        SemanticCacheState {
            config: CacheConfig { capacity, theta_c: repo.theta_c, ..CacheConfig::default() },
            epoch: 0,
            centroids: Vec::new(),
            overflow_entries: Vec::new(),
        }
    };
    let cache = SemanticCache::from_state(&state)?;
    let ev = cache.run_replacement(&repo)?;
    println!(
        "epoch {}: merged {}, appended {}, evicted {}; {} centroids, {} -> {} bytes",
        ev.epoch,
        ev.merged,
        ev.appended,
        ev.evicted,
        cache.view().len(),
        ev.bytes_before,
        ev.bytes_after
    );
    let out = a.out.as_ref().unwrap_or(&a.cache);
    write_atomic(out, &serde_json::to_vec(&cache.state())?)?;
    if let Some(log_path) = &a.log {
        let mut bytes = if log_path.exists() { std::fs::read(log_path)? } else { Vec::new() };
        serde_json::to_writer(&mut bytes, &ev)?;
        bytes.push(b'\n');
        write_atomic(log_path, &bytes)?;
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, m: &ArgMatches) -> Result<()> {
    let (spec, cfg) = resolve_run(&a.workload, m)?;
    let prep = Prepared::new(&spec.source, spec.seed)?;
    let report = if a.live {
        let backend: Arc<dyn LlmBackend> = match &a.backend_url {
            Some(url) => Arc::new(HttpBackend::new(HttpBackendConfig { url: url.clone(), ..Default::default() })?),
            None => Arc::new(MockBackend::new(cfg.llm.clone(), spec.seed)?),
        };
        run_live(&spec, &cfg, &prep, backend, LiveConfig { time_scale: a.time_scale, ..Default::default() })?
    } else {
        let out = run_simulation_detailed(&spec, &cfg, &prep)?;
        if let Some(p) = &a.trace {
            write_atomic(p, trace_csv(&out.trace).as_bytes())?;
        }
        out.report
    };
    write_atomic(&a.out, &report.to_json()?)?;
    println!("mode            {}", cfg.mode);
    println!("requests        {}", report.requests);
    println!("hit_ratio       {:.4}", report.hit_ratio);
    println!("slo_attainment  {:.4}", report.slo_attainment);
    println!("mean_latency    {:.4}s", report.latency.mean);
    println!("p99_latency     {:.4}s", report.latency.p99);
    println!("mean_wait       {:.4}s", report.mean_wait);
    println!("mean_llm_wait   {:.4}s", report.mean_llm_sojourn);
    println!("report_sha256   {}", report.digest()?);
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, m: &ArgMatches) -> Result<()> {
    let (spec, cfg) = resolve_run(&a.workload, m)?;
    let rows = experiment_sweeps(&spec, &cfg, &a.sweep, &a.modes)?;
    let csv = sweep_csv(&rows);
    write_atomic(&a.out, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_t2h(a: &T2hArgs) -> Result<()> {
    let state: SemanticCacheState = serde_json::from_slice(&std::fs::read(&a.cache)?)?;
    let cache = SemanticCache::from_state(&state)?;
    let mut queries = read_jsonl(&a.queries)?;
    ensure_embeddings(&mut queries, &a.embed, a.seed)?;
    let table = build_t2h(&cache, &queries, a.sample_frac, &a.grid, a.seed)?;
    println!("sampled {} of {} queries", table.sample_count, queries.len());
    println!("theta  hit_ratio");
    for (t, h) in &table.entries {
        println!("{t:.2}   {h:.4}");
    }
    if let Some(p) = &a.out {
        write_atomic(p, &serde_json::to_vec_pretty(&table)?)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter(_) | Error::Parse { .. } | Error::DimensionMismatch { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();

    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    let result = match &cli.command {
        Command::Cluster(a) => cmd_cluster(a),
        Command::Replace(a) => cmd_replace(a),
        Command::Simulate(a) => cmd_simulate(a, sub),
        Command::Sweep(a) => cmd_sweep(a, sub),
        Command::T2h(a) => cmd_t2h(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_sizes() {
        assert_eq!(parse_bytes("64MB"), Ok(64 << 20));
        assert_eq!(parse_bytes("1024"), Ok(1024));
        assert_eq!(parse_bytes("2k"), Ok(2048));
        assert!(parse_bytes("0").is_err());
        assert!(parse_bytes("3TB").is_err());
        assert!(parse_bytes("MB").is_err());
    }

    #[test]
    fn grids() {
        let g = parse_grid("0.98:0.60:0.02").unwrap();
        assert_eq!(g.len(), 20);
        assert_eq!(g, crate::controller::default_grid());
        assert!(parse_grid("0.6:0.9:0.1").is_err());
        assert!(parse_grid("0.9:0.6").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flag_defaults_match_library_defaults() {
        let w = WorkloadSpec::default();
        let s = SystemConfig::default();
        let m = Cli::command().get_matches_from(["x", "simulate"]);
        let cli = Cli::from_arg_matches(&m).unwrap();
        let Command::Simulate(a) = cli.command else { panic!() };
        let (spec, cfg) = resolve_run(&a.workload, m.subcommand().unwrap().1).unwrap();
        assert_eq!(spec, w);
        assert_eq!(cfg, s);
    }

    #[test]
    fn config_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[workload]\nrps = 3.0\ncv = 2.0\n[system]\nmode = \"vllm-only\"\n").unwrap();
        let args = ["x", "simulate", "--config", p.to_str().unwrap(), "--cv", "4"];
        let m = Cli::command().get_matches_from(args);
        let Command::Simulate(a) = Cli::from_arg_matches(&m).unwrap().command else { panic!() };
        let (spec, cfg) = resolve_run(&a.workload, m.subcommand().unwrap().1).unwrap();
        assert_eq!(spec.rps, 3.0);
        assert_eq!(spec.cv, 4.0);
        assert_eq!(cfg.mode, Mode::VllmOnly);
    }
}
