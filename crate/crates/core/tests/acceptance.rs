//! End-to-end acceptance checks. Each check prints one `PASS` or `FAIL`
//! line; the process exits non-zero when any check fails.

use std::collections::HashMap;
use std::time::Instant;

use centroid_cache::cache::{filter_centroids, merge_centroids, Capacity, CacheConfig, SemanticCache, SemanticCacheState};
use centroid_cache::cluster::{build_repository, community_detect, AccessCount, Centroid, CentroidRepository};
use centroid_cache::controller::{build_t2h, default_grid, estimate_wait, md1_wait, ControllerConfig};
use centroid_cache::corpus::{PlantedModel, PlantedSpec, QueryRecord};
use centroid_cache::index::{HnswIndex, HnswParams, LevelPolicy};
use centroid_cache::sim::{
    experiment_sweeps, run_simulation_detailed, CacheCosts, Mode, MockLlmConfig, Phase, Prepared, QuerySource,
    RepeatConfig, Sweep, SystemConfig, TokenHistogram, WorkloadSpec, POLICY_MODES,
};
use centroid_cache::vector::{dot, Embedding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- helpers

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn to_embedding(v: &[f64]) -> Embedding {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Embedding::new(v.iter().map(|x| (x / n) as f32).collect()).unwrap()
}

/// A unit vector whose expected cosine with `center` is `1/sqrt(1+sigma^2)`.
fn jitter(center: &[f32], sigma: f64, rng: &mut impl Rng) -> Embedding {
    let scale = sigma / (center.len() as f64).sqrt();
    let v: Vec<f64> = center
        .iter()
        .map(|&c| {
            let g: f64 = StandardNormal.sample(rng);
            c as f64 + scale * g
        })
        .collect();
    to_embedding(&v)
}

/// Mean time in system of a FIFO single server with Poisson arrivals and
/// constant service, by the Lindley recursion. Near saturation the plain
/// sample mean is dominated by whether arrivals happened to come early or
/// late, so the known mean inter-arrival time serves as a control variate,
/// with its coefficient fitted on batch means of the same run.
fn lindley_md1(lambda: f64, service: f64, arrivals: usize, seed: u64) -> f64 {
    const BATCHES: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(lambda).unwrap();
    let per_batch = arrivals / BATCHES;
    let (mut t, mut free_at) = (0.0f64, 0.0f64);
    let mut batches: Vec<(f64, f64)> = Vec::with_capacity(BATCHES);
    for _ in 0..BATCHES {
        let (mut sojourn, mut gaps) = (0.0, 0.0);
        for _ in 0..per_batch {
            let gap = exp.sample(&mut rng);
            gaps += gap;
            t += gap;
            let start = t.max(free_at);
            free_at = start + service;
            sojourn += free_at - t;
        }
        batches.push((sojourn / per_batch as f64, gaps / per_batch as f64));
    }
    let n = BATCHES as f64;
    let mean_w = batches.iter().map(|b| b.0).sum::<f64>() / n;
    let mean_a = batches.iter().map(|b| b.1).sum::<f64>() / n;
    let cov = batches.iter().map(|b| (b.0 - mean_w) * (b.1 - mean_a)).sum::<f64>();
    let var = batches.iter().map(|b| (b.1 - mean_a).powi(2)).sum::<f64>();
    mean_w - cov / var * (mean_a - 1.0 / lambda)
}

fn comb2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table.
fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut ra: HashMap<usize, u64> = HashMap::new();
    let mut rb: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| comb2(n)).sum();
    let sa: f64 = ra.values().map(|&n| comb2(n)).sum();
    let sb: f64 = rb.values().map(|&n| comb2(n)).sum();
    let expected = sa * sb / comb2(a.len() as u64);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Merge written directly from its definition: scan the working set for the
/// first maximum, fold on strict excess over the threshold, else append with
/// an infinite access count.
fn reference_merge(cur: &[Centroid], repo: &[Centroid], theta_c: f64) -> Vec<Centroid> {
    let mut working = cur.to_vec();
    for r in repo {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in working.iter().enumerate() {
            let s = dot(c.vector.as_slice(), r.vector.as_slice());
            if best.is_none() || s > best.unwrap().1 {
                best = Some((i, s));
            }
        }
        match best {
            Some((i, s)) if s > theta_c => working[i].cluster_size += r.cluster_size,
            _ => {
                let mut c = r.clone();
                c.access_count = AccessCount::INFINITE;
                working.push(c);
            }
        }
    }
    working
}

fn charge(capacity: Capacity, c: &Centroid) -> u64 {
    match capacity {
        Capacity::Entries(_) => 1,
        Capacity::Bytes(_) => c.vector.dim() as u64 * 4 + c.output.len() as u64 + 64,
    }
}

fn limit(capacity: Capacity) -> u64 {
    match capacity {
        Capacity::Entries(n) | Capacity::Bytes(n) => n,
    }
}

/// Ascending sort key with the infinite access count placed last.
fn reference_key(c: &Centroid) -> (f64, u64, bool, u64) {
    let (inf, count) = match c.access_count.get() {
        Some(n) => (false, n),
        None => (true, 0),
    };
    (c.cluster_size, if inf { u64::MAX } else { count }, inf, c.id)
}

/// Filter written directly from its definition: re-sort and recompute usage
/// before every single eviction.
fn reference_filter(mut list: Vec<Centroid>, capacity: Capacity) -> (Vec<Centroid>, Vec<u64>) {
    let mut evicted = Vec::new();
    loop {
        let usage: u64 = list.iter().map(|c| charge(capacity, c)).sum();
        if usage <= limit(capacity) || list.is_empty() {
            break;
        }
        let mut order: Vec<usize> = (0..list.len()).collect();
        order.sort_by(|&a, &b| reference_key(&list[a]).partial_cmp(&reference_key(&list[b])).unwrap());
        evicted.push(list.remove(order[0]).id);
    }
    for c in &mut list {
        c.cluster_size /= 1.1;
        c.access_count = AccessCount::new(0);
    }
    (list, evicted)
}

fn same_centroids(a: &[Centroid], b: &[Centroid]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.id == y.id && x.cluster_size.to_bits() == y.cluster_size.to_bits() && x.access_count == y.access_count
        })
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Centroid>, Vec<Centroid>, Capacity) {
    let dim = 6;
    let n_cur = rng.random_range(0..12);
    let n_repo = rng.random_range(0..12);
    let size = |rng: &mut ChaCha8Rng| -> f64 {
        if rng.random_bool(0.5) {
            rng.random_range(1..6) as f64
        } else {
            rng.random_range(0.5..20.0)
        }
    };
    let cur: Vec<Centroid> = (0..n_cur)
        .map(|i| {
            let mut c = Centroid::new(i, to_embedding(&random_unit(dim, rng)), format!("out{i}"), size(rng));
            c.access_count = match rng.random_range(0..4) {
                0 => AccessCount::INFINITE,
                1 => AccessCount::new(0),
                _ => AccessCount::new(rng.random_range(0..5)),
            };
            c
        })
        .collect();
    let repo: Vec<Centroid> = (0..n_repo)
        .map(|j| {
            let v = if !cur.is_empty() && rng.random_bool(0.5) {
                let k = rng.random_range(0..cur.len());
                jitter(cur[k].vector.as_slice(), rng.random_range(0.0..0.6), rng)
            } else {
                to_embedding(&random_unit(dim, rng))
            };
            Centroid::new(1000 + j, v, "o".repeat(rng.random_range(1..40)), size(rng))
        })
        .collect();
    let capacity = if rng.random_bool(0.5) {
        Capacity::Entries(rng.random_range(1..16))
    } else {
        Capacity::Bytes(rng.random_range(100..1600))
    };
    (cur, repo, capacity)
}

fn small_llm(l: f64) -> MockLlmConfig {
    let tokens = 100u32;
    MockLlmConfig {
        ttft: 0.3 * l,
        tbt: 0.7 * l / tokens as f64,
        output_tokens: TokenHistogram::degenerate(tokens).unwrap(),
        servers: 1,
        ..Default::default()
    }
}

fn no_repeat() -> RepeatConfig {
    RepeatConfig { enabled: false, ..Default::default() }
}

/// Zipf-skewed planted workload used by the hit-ratio comparisons: many
/// more topics than cache slots, topic spread chosen so a single cached
/// query covers only part of its topic while the topic mean covers nearly
/// all of it.
fn skewed_workload() -> WorkloadSpec {
    WorkloadSpec {
        rps: 20.0,
        cv: 1.0,
        duration: 300.0,
        source: QuerySource::Planted(PlantedSpec {
            n_clusters: 500,
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
    }
}

fn skewed_system() -> SystemConfig {
    SystemConfig {
        theta_c: 0.82,
        llm: MockLlmConfig {
            ttft: 0.01,
            tbt: 0.0001,
            output_tokens: TokenHistogram::degenerate(10).unwrap(),
            servers: 64,
            ..Default::default()
        },
        repeat: no_repeat(),
        ..Default::default()
    }
}

// ---------------------------------------------------------------- checks

fn queueing_fidelity() -> Verdict {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (k, &rho) in [0.3, 0.5, 0.7, 0.9].iter().enumerate() {
        let service = 1.0;
        let des = lindley_md1(rho / service, service, 100_000, 100 + k as u64);
        let model = md1_wait(rho / service, service);
        let err = (model - des).abs() / des;
        worst = worst.max(err);
        parts.push(format!("rho={rho}: model {model:.4} des {des:.4}"));
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(worst < 0.05 && secs < 10.0, format!("max rel err {worst:.4}, {secs:.2}s; {}", parts.join("; ")))
}

fn wait_reduction() -> Verdict {
    let mut ok = true;
    let mut checked = 0;
    for &(lambda, l) in &[(0.5, 1.0), (2.0, 0.3), (9.0, 0.1), (1.5, 1.0), (0.0, 2.0)] {
        ok &= estimate_wait(lambda, l, 0.0) == md1_wait(lambda, l);
        ok &= estimate_wait(lambda, l, 1.0) == 0.0;
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let h = i as f64 / 49.0;
            let w = estimate_wait(lambda, l, h);
            ok &= w <= prev || (w.is_infinite() && prev.is_infinite());
            prev = w;
            checked += 1;
        }
    }
    verdict(ok, format!("{checked} grid points over 5 (lambda, L) pairs"))
}

fn replacement_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let theta_c = 0.86;
    let mut failures = Vec::new();
    let mut evictions = 0usize;
    for case in 0..1000 {
        let (cur, repo, capacity) = random_case(&mut rng);

        let merged = merge_centroids(&cur, &repo, theta_c).centroids;
        let ref_merged = reference_merge(&cur, &repo, theta_c);
        if !same_centroids(&merged, &ref_merged) {
            failures.push(format!("case {case}: merge differs"));
            continue;
        }
        let before: f64 = cur.iter().chain(&repo).map(|c| c.cluster_size).sum();
        let after: f64 = merged.iter().map(|c| c.cluster_size).sum();
        if (before - after).abs() > 1e-9 * before.max(1.0) {
            failures.push(format!("case {case}: size {before} -> {after}"));
        }

        let filtered = filter_centroids(merged.clone(), capacity);
        let (ref_survivors, ref_evicted) = reference_filter(merged.clone(), capacity);
        evictions += ref_evicted.len();
        if !same_centroids(&filtered.survivors, &ref_survivors) || filtered.evicted != ref_evicted {
            failures.push(format!("case {case}: filter differs"));
            continue;
        }
        let pre: HashMap<u64, &Centroid> = merged.iter().map(|c| (c.id, c)).collect();
        for s in &filtered.survivors {
            let p = pre[&s.id];
            if s.cluster_size != p.cluster_size / 1.1 || s.access_count != AccessCount::new(0) {
                failures.push(format!("case {case}: survivor {} not decayed/reset", s.id));
            }
            for e in &filtered.evicted {
                if reference_key(pre[e]) > reference_key(p) {
                    failures.push(format!("case {case}: evicted {e} ranks above survivor {}", s.id));
                }
            }
        }

        // The composed cache operation matches the two references chained.
        let cfg = CacheConfig { capacity, theta_c, ..Default::default() };
        let mut sorted_cur = cur.clone();
        sorted_cur.sort_by_key(|c| c.id);
        let cache = SemanticCache::from_state(&SemanticCacheState {
            config: cfg,
            epoch: 0,
            centroids: sorted_cur.clone(),
            overflow_entries: Vec::new(),
        })
        .unwrap();
        let repository =
            CentroidRepository { centroids: repo.clone(), theta_c, source_query_count: 0, built_at: 0.0 };
        cache.run_replacement(&repository).unwrap();
        let mut live = cache.centroids();
        live.sort_by_key(|c| c.id);
        let (mut expected, _) = reference_filter(reference_merge(&sorted_cur, &repo, theta_c), capacity);
        expected.sort_by_key(|c| c.id);
        if !same_centroids(&live, &expected) {
            failures.push(format!("case {case}: run_replacement differs"));
        }
    }
    let detail = format!("1000 cases, {evictions} reference evictions, {} mismatches", failures.len());
    if let Some(f) = failures.first() {
        return verdict(false, format!("{detail}; first: {f}"));
    }
    verdict(true, detail)
}

fn clustering_recovery() -> Verdict {
    let configs = [(10, 100, 0.92, 768, 1u64), (40, 40, 0.91, 256, 2), (100, 30, 0.95, 128, 3)];
    let theta_c = 0.86;
    let mut worst: f64 = 1.0;
    let mut conserved = true;
    for &(n_clusters, per_cluster, intra_sim, dim, seed) in &configs {
        let model =
            PlantedModel::new(PlantedSpec { n_clusters, per_cluster, intra_sim, dim, seed, ..Default::default() })
                .unwrap();
        let log = model.corpus();
        let vectors: Vec<Embedding> = log.iter().map(|r| r.embedding.clone().unwrap()).collect();
        let sets = community_detect(&vectors, theta_c, 2).unwrap();
        let mut predicted = vec![0usize; log.len()];
        for (k, set) in sets.iter().enumerate() {
            for &i in set {
                predicted[i] = k;
            }
        }
        let truth: Vec<usize> = log.iter().map(|r| r.cluster.unwrap() as usize).collect();
        worst = worst.min(adjusted_rand_index(&truth, &predicted));
        let repo = build_repository(&log, theta_c, 2).unwrap();
        let total: f64 = repo.centroids.iter().map(|c| c.cluster_size).sum();
        conserved &= total == log.len() as f64;
    }
    verdict(worst >= 0.95 && conserved, format!("min ARI {worst:.4} over 3 corpora, sizes conserved: {conserved}"))
}

/// Centroids with Zipf-distributed cluster sizes and ids uncorrelated with
/// size.
fn zipf_centroids(n: usize, dim: usize, seed: u64) -> Vec<Centroid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u64> = (0..n as u64).collect();
    for i in (1..n).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    (0..n)
        .map(|rank| {
            let v = to_embedding(&random_unit(dim, &mut rng));
            Centroid::new(ids[rank], v, format!("out{rank}"), 1000.0 / (rank + 1) as f64)
        })
        .collect()
}

fn index_recall() -> Verdict {
    let centroids = zipf_centroids(10_000, 64, 11);
    let params = HnswParams { ef_search: 64, ..Default::default() };
    let index = HnswIndex::build(&centroids, params, LevelPolicy::Locality).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let probes = 2000;
    let mut agree = 0;
    let mut hits = 0;
    let mut sound = 0;
    for _ in 0..probes {
        let target = &centroids[rng.random_range(0..centroids.len())];
        let q = jitter(target.vector.as_slice(), rng.random_range(0.2..0.8), &mut rng);
        let exact = centroids
            .iter()
            .map(|c| (c.id, dot(c.vector.as_slice(), q.as_slice())))
            .fold(None, |best: Option<(u64, f64)>, (id, s)| match best {
                Some((bid, bs)) if bs > s || (bs == s && bid < id) => best,
                _ => Some((id, s)),
            })
            .unwrap();
        if index.nearest(&q).unwrap().map(|(id, _)| id) == Some(exact.0) {
            agree += 1;
        }
        for &theta in &[0.6, 0.75, 0.86, 0.95] {
            if let Some((id, s)) = index.search(&q, theta).unwrap().hit {
                hits += 1;
                let c = centroids.iter().find(|c| c.id == id).unwrap();
                let true_sim = dot(c.vector.as_slice(), q.as_slice());
                if s >= theta && true_sim >= theta {
                    sound += 1;
                }
            }
        }
    }
    let mut by_size: Vec<&Centroid> = centroids.iter().collect();
    by_size.sort_by(|a, b| b.cluster_size.total_cmp(&a.cluster_size));
    let levels: Vec<usize> = by_size.iter().map(|c| index.level_of(c.id).unwrap()).collect();
    let monotone = by_size
        .windows(2)
        .zip(levels.windows(2))
        .all(|(c, l)| c[0].cluster_size == c[1].cluster_size || l[0] >= l[1]);
    let recall = agree as f64 / probes as f64;
    verdict(
        recall >= 0.95 && sound == hits && monotone,
        format!("top-1 recall {recall:.4}, sound hits {sound}/{hits}, levels monotone: {monotone}, max level {}", index.max_level()),
    )
}

fn locality_benefit() -> Verdict {
    let centroids = zipf_centroids(5000, 64, 21);
    let params = HnswParams::default();
    let locality = HnswIndex::build(&centroids, params, LevelPolicy::Locality).unwrap();
    let weights: Vec<f64> = (0..centroids.len()).map(|r| 1.0 / (r + 1) as f64).collect();
    let pick = rand_distr::weighted::WeightedIndex::new(&weights).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let probes: Vec<Embedding> =
        (0..5000).map(|_| jitter(centroids[pick.sample(&mut rng)].vector.as_slice(), 0.4, &mut rng)).collect();
    let mean_cost = |index: &HnswIndex| -> f64 {
        let total: u64 = probes.iter().map(|q| index.search(q, 0.86).unwrap().distance_computations).sum();
        total as f64 / probes.len() as f64
    };
    let loc = mean_cost(&locality);
    let mut randoms = Vec::new();
    for seed in [1, 2, 3] {
        let random = HnswIndex::build(&centroids, params, LevelPolicy::Random { seed }).unwrap();
        randoms.push(mean_cost(&random));
    }
    let worst_random = randoms.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        loc <= worst_random,
        format!("mean distance computations: locality {loc:.1}, random {randoms:.1?} (ratio {:.2}x)", worst_random / loc),
    )
}

fn centroid_vs_lru() -> Verdict {
    let rows = experiment_sweeps(&skewed_workload(), &skewed_system(), &Sweep::Policy(POLICY_MODES.to_vec()), &[])
        .unwrap();
    let ratio_of = |m: Mode| rows.iter().find(|r| r.mode == m).unwrap().hit_ratio;
    let centroid = ratio_of(Mode::SisoNodta);
    let lru = ratio_of(Mode::GptcacheLru);
    let others = [Mode::Lfu, Mode::Fifo, Mode::Rr].map(ratio_of);
    let beats_all = others.iter().all(|&h| centroid >= h);
    verdict(
        centroid >= 1.2 * lru && beats_all,
        format!(
            "centroid {centroid:.4}, lru {lru:.4} ({:.2}x), lfu {:.4}, fifo {:.4}, rr {:.4}",
            centroid / lru,
            others[0],
            others[1],
            others[2]
        ),
    )
}

fn capacity_sweep_shape() -> Verdict {
    let fractions = vec![0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5];
    let rows = experiment_sweeps(
        &skewed_workload(),
        &skewed_system(),
        &Sweep::Capacity(fractions.clone()),
        &[Mode::SisoNodta, Mode::GptcacheLru],
    )
    .unwrap();
    let curve = |m: Mode| -> Vec<f64> {
        fractions
            .iter()
            .map(|f| {
                rows.iter().find(|r| r.mode == m && r.value.parse::<f64>().unwrap() == *f).unwrap().hit_ratio
            })
            .collect()
    };
    let knee = |h: &[f64]| -> f64 {
        let plateau = h.iter().copied().fold(0.0, f64::max);
        fractions[h.iter().position(|&x| x >= 0.98 * plateau).unwrap()]
    };
    let (c, l) = (curve(Mode::SisoNodta), curve(Mode::GptcacheLru));
    let (kc, kl) = (knee(&c), knee(&l));
    verdict(kc < kl, format!("within 2% of plateau at capacity {kc} (centroid) vs {kl} (lru); centroid {c:.3?}; lru {l:.3?}"))
}

fn closed_loop_control() -> Verdict {
    let l = 0.1;
    let mu = 1.0 / l;
    let window = 30.0;
    let phases = vec![
        Phase { duration: 300.0, rps: 0.3 * mu },
        Phase { duration: 100.0, rps: 0.6 * mu },
        Phase { duration: 100.0, rps: 0.9 * mu },
        Phase { duration: 100.0, rps: 1.2 * mu },
        Phase { duration: 800.0, rps: 1.5 * mu },
    ];
    let low_end = phases[0].duration;
    let steady_from = 800.0;
    let spec = WorkloadSpec {
        phases,
        source: QuerySource::Planted(PlantedSpec {
            n_clusters: 2000,
            per_cluster: 5,
            intra_sim: 0.86,
            intra_sim_jitter: 0.02,
            families: 200,
            family_sim: 0.75,
            dim: 64,
            seed: 1,
            ..Default::default()
        }),
        seed: 1,
        ..Default::default()
    };
    let prep = Prepared::new(&spec.source, spec.seed).unwrap();
    let mut attainment = HashMap::new();
    let mut ceiling = true;
    for mode in [Mode::Siso, Mode::SisoNodta, Mode::VllmOnly] {
        let cfg = SystemConfig {
            mode,
            llm: small_llm(l),
            costs: CacheCosts::default().scaled(l),
            controller: ControllerConfig { window_seconds: window, ..Default::default() },
            repeat: no_repeat(),
            ..Default::default()
        };
        let out = run_simulation_detailed(&spec, &cfg, &prep).unwrap();
        let steady: Vec<_> = out.records.iter().filter(|r| r.arrival_t >= steady_from).collect();
        let ok = steady.iter().filter(|r| r.slo_ok).count() as f64 / steady.len() as f64;
        attainment.insert(mode, ok);
        if mode == Mode::Siso {
            ceiling = out
                .trace
                .iter()
                .filter(|r| (r.tick as f64 + 1.0) * window <= low_end)
                .all(|r| r.theta_r == 0.98);
        }
    }
    let (s, n, v) = (attainment[&Mode::Siso], attainment[&Mode::SisoNodta], attainment[&Mode::VllmOnly]);
    verdict(
        s >= 0.9 && n < 0.5 && v < 0.5 && ceiling,
        format!("steady attainment at rho=1.5: siso {s:.3}, siso-nodta {n:.3}, vllm-only {v:.3}; theta at 0.98 while rho=0.3: {ceiling}"),
    )
}

fn t2h_consistency() -> Verdict {
    let model = PlantedModel::new(PlantedSpec {
        n_clusters: 500,
        per_cluster: 10,
        intra_sim: 0.86,
        intra_sim_jitter: 0.03,
        zipf_s: 1.0,
        families: 50,
        family_sim: 0.6,
        dim: 64,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let history = model.corpus();
    let cache = SemanticCache::new(CacheConfig {
        capacity: Capacity::Entries(300),
        theta_c: 0.82,
        overflow: false,
        ..Default::default()
    })
    .unwrap();
    cache.run_replacement(&build_repository(&history, 0.82, 2).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let stream: Vec<QueryRecord> = (0..30_000)
        .map(|i| {
            let c = model.sample_cluster(&mut rng);
            model.sample_record(format!("s{i}"), c, &mut rng)
        })
        .collect();
    let grid = default_grid();
    let table = build_t2h(&cache, &stream, 0.05, &grid, 9).unwrap();
    let mut worst: f64 = 0.0;
    let mut at = 0.0;
    for &theta in &grid {
        let hits = stream
            .iter()
            .filter(|q| cache.probe(q.embedding.as_ref().unwrap(), theta).unwrap().is_hit())
            .count();
        let measured = hits as f64 / stream.len() as f64;
        let err = (table.hit_ratio(theta) - measured).abs();
        if err > worst {
            worst = err;
            at = theta;
        }
    }
    let range = (table.entries[0].1, table.entries[grid.len() - 1].1);
    verdict(
        worst <= 0.05,
        format!(
            "max |predicted - measured| {worst:.4} at theta {at:.2}; sample {} of {}; h from {:.3} to {:.3}",
            table.sample_count,
            stream.len(),
            range.0,
            range.1
        ),
    )
}

fn determinism() -> Verdict {
    let spec = WorkloadSpec { duration: 120.0, ..skewed_workload() };
    let prep = Prepared::new(&spec.source, spec.seed).unwrap();
    let mut ok = true;
    let mut names = Vec::new();
    for mode in Mode::ALL {
        let cfg = SystemConfig { mode, llm: small_llm(0.05), ..skewed_system() };
        let a = run_simulation_detailed(&spec, &cfg, &prep).unwrap().report.to_json().unwrap();
        let fresh = Prepared::new(&spec.source, spec.seed).unwrap();
        let b = run_simulation_detailed(&spec, &cfg, &fresh).unwrap().report.to_json().unwrap();
        ok &= a == b;
        names.push(mode.name());
    }
    verdict(ok, format!("byte-identical reports for {}", names.join(", ")))
}

fn main() {
    let checks: [(&str, fn() -> Verdict); 11] = [
        ("queueing fidelity", queueing_fidelity),
        ("wait reduction and limits", wait_reduction),
        ("replacement exactness", replacement_exactness),
        ("clustering recovery", clustering_recovery),
        ("index recall", index_recall),
        ("locality placement benefit", locality_benefit),
        ("centroid vs lru hit ratio", centroid_vs_lru),
        ("capacity sweep shape", capacity_sweep_shape),
        ("closed-loop slo control", closed_loop_control),
        ("t2h consistency", t2h_consistency),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {} [{:.1}s]", v.detail, started.elapsed().as_secs_f64());
        failed += usize::from(!v.pass);
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
