//! Query records, JSON Lines ingestion and planted synthetic corpora.
//!
//! A planted corpus is the ground truth for every desk-scale experiment:
//! each cluster owns a unit "topic" vector and its queries are that topic
//! plus isotropic Gaussian noise. For noise scale `sigma` the expected cosine
//! between two members is `1 / (1 + sigma^2)` and between a member and the
//! topic `1 / sqrt(1 + sigma^2)`, so `sigma^2 = 1 / intra_sim - 1` yields the
//! requested intra-cluster similarity.
//!
//! Clusters can optionally be grouped into families whose topics share a
//! common component, which gives the threshold-to-hit-ratio curve the graded
//! shape real query logs show: near-duplicates at high similarity, related
//! questions at moderate similarity.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::vector::{normalize, normalize_f64, random_unit, synthetic_embed, Embedding};

/// One query from a log or a workload stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    #[serde(default, alias = "user_id")]
    pub user: String,
    #[serde(default, alias = "timestamp")]
    pub ts: f64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Embedding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Ground-truth cluster of a planted record. Never consulted by the
    /// system itself, only by oracles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<u32>,
}

impl QueryRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        QueryRecord {
            id: id.into(),
            user: String::new(),
            ts: 0.0,
            text: text.into(),
            embedding: None,
            response: None,
            cluster: None,
        }
    }

    pub fn with_embedding(mut self, e: Embedding) -> Self {
        self.embedding = Some(e);
        self
    }

    pub fn with_response(mut self, r: impl Into<String>) -> Self {
        self.response = Some(r.into());
        self
    }
}

/// Parses a JSON Lines query log. Blank lines are skipped, unknown fields
/// ignored. Errors carry the 1-based line number.
pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<QueryRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>> {
    let f = File::open(path)?;
    parse_jsonl(BufReader::new(f))
}

pub fn write_jsonl<W: Write>(records: &[QueryRecord], writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Normalizes provided embeddings and fills missing ones with the synthetic
/// embedder.
pub fn embed_missing(records: &mut [QueryRecord], dim: usize, seed: u64) -> Result<()> {
    for r in records.iter_mut() {
        r.embedding = Some(match r.embedding.take() {
            Some(e) => {
                if e.dim() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: e.dim() });
                }
                normalize(&e)?
            }
            None => synthetic_embed(&r.text, dim, seed),
        });
    }
    Ok(())
}

/// Sorts records for replay: by timestamp, ties by id.
pub fn sort_for_replay(records: &mut [QueryRecord]) {
    records.sort_by(|a, b| a.ts.total_cmp(&b.ts).then_with(|| a.id.cmp(&b.id)));
}

/// Parameters of a planted corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSpec {
    pub n_clusters: usize,
    /// Mean records per cluster; the total is `n_clusters * per_cluster`.
    pub per_cluster: usize,
    /// Expected cosine between two members of one cluster.
    pub intra_sim: f64,
    /// Per-cluster `intra_sim` is drawn uniformly from
    /// `intra_sim +- intra_sim_jitter`.
    pub intra_sim_jitter: f64,
    /// Zipf exponent of cluster popularity; 0 gives uniform sizes.
    pub zipf_s: f64,
    /// Number of topic families; 0 disables the family structure.
    pub families: usize,
    /// Expected cosine between topics of one family.
    pub family_sim: f64,
    pub dim: usize,
    pub users: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            n_clusters: 10,
            per_cluster: 100,
            intra_sim: 0.92,
            intra_sim_jitter: 0.0,
            zipf_s: 0.0,
            families: 0,
            family_sim: 0.7,
            dim: crate::vector::DEFAULT_DIM,
            users: 100,
            seed: 0,
        }
    }
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.intra_sim > 0.0 && self.intra_sim < 1.0) {
            return Err(invalid(format!("intra_sim must be in (0,1), got {}", self.intra_sim)));
        }
        let lo = self.intra_sim - self.intra_sim_jitter;
        let hi = self.intra_sim + self.intra_sim_jitter;
        if self.intra_sim_jitter < 0.0 || lo <= 0.0 || hi >= 1.0 {
            return Err(invalid("intra_sim +- jitter must stay inside (0,1)"));
        }
        if self.n_clusters == 0 || self.n_clusters * self.per_cluster == 0 {
            return Err(invalid("corpus must contain at least one record"));
        }
        if self.dim < 2 {
            return Err(invalid("dim must be >= 2"));
        }
        if self.zipf_s < 0.0 || !self.zipf_s.is_finite() {
            return Err(invalid("zipf_s must be a finite non-negative number"));
        }
        if self.families > 0 && !(self.family_sim > 0.0 && self.family_sim < 1.0) {
            return Err(invalid("family_sim must be in (0,1)"));
        }
        Ok(())
    }
}

/// Zipf weights over `n` ranks, normalized to sum to one.
pub fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Largest-remainder apportionment of `total` items by `weights`.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// The generative model behind a planted corpus. It can emit the historical
/// log and keep sampling fresh queries from the same distribution.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    spec: PlantedSpec,
    topics: Vec<Vec<f64>>,
    sigmas: Vec<f64>,
    popularity: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl PlantedModel {
    pub fn new(spec: PlantedSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let dim = spec.dim;
        let family_bases: Vec<Vec<f64>> =
            (0..spec.families).map(|_| random_unit(dim, &mut rng)).collect();
        let mut topics = Vec::with_capacity(spec.n_clusters);
        let mut sigmas = Vec::with_capacity(spec.n_clusters);
        for c in 0..spec.n_clusters {
            let own = random_unit(dim, &mut rng);
            let topic = if spec.families > 0 {
                // cos(t_a, t_b) ~ family_sim for two members of one family.
                let base = &family_bases[c % spec.families];
                let a = spec.family_sim.sqrt();
                let b = (1.0 - spec.family_sim).sqrt();
                let mixed: Vec<f64> = base.iter().zip(&own).map(|(x, y)| a * x + b * y).collect();
                let n = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
                mixed.into_iter().map(|x| x / n).collect()
            } else {
                own
            };
            topics.push(topic);
            let s = if spec.intra_sim_jitter > 0.0 {
                spec.intra_sim + rng.random_range(-spec.intra_sim_jitter..=spec.intra_sim_jitter)
            } else {
                spec.intra_sim
            };
            sigmas.push((1.0 / s - 1.0).sqrt());
        }
        let popularity = zipf_weights(spec.n_clusters, spec.zipf_s);
        let sampler = WeightedIndex::new(&popularity).map_err(|e| invalid(e.to_string()))?;
        Ok(PlantedModel { spec, topics, sigmas, popularity, sampler })
    }

    pub fn spec(&self) -> &PlantedSpec {
        &self.spec
    }

    pub fn n_clusters(&self) -> usize {
        self.topics.len()
    }

    /// Popularity weight of each cluster (cluster 0 is the most popular).
    pub fn popularity(&self) -> &[f64] {
        &self.popularity
    }

    pub fn topic(&self, cluster: usize) -> Embedding {
        normalize_f64(&self.topics[cluster]).expect("topics are unit vectors")
    }

    pub fn response_for(cluster: usize) -> String {
        format!("answer for topic {cluster}")
    }

    /// Draws a cluster by popularity.
    pub fn sample_cluster<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler.sample(rng)
    }

    /// Draws a fresh member of `cluster`.
    pub fn sample_member<R: Rng + ?Sized>(&self, cluster: usize, rng: &mut R) -> Embedding {
        let dim = self.spec.dim;
        let scale = self.sigmas[cluster] / (dim as f64).sqrt();
        let v: Vec<f64> = self.topics[cluster]
            .iter()
            .map(|t| {
                let g: f64 = StandardNormal.sample(rng);
                t + scale * g
            })
            .collect();
        normalize_f64(&v).expect("perturbed topic is non-zero")
    }

    /// Builds a complete record for a fresh member of `cluster`.
    pub fn sample_record<R: Rng + ?Sized>(&self, id: String, cluster: usize, rng: &mut R) -> QueryRecord {
        let user = format!("u{}", rng.random_range(0..self.spec.users.max(1)));
        let emb = self.sample_member(cluster, rng);
        QueryRecord {
            text: format!("topic {cluster} / {id}"),
            id,
            user,
            ts: 0.0,
            embedding: Some(emb),
            response: Some(Self::response_for(cluster)),
            cluster: Some(cluster as u32),
        }
    }

    /// The historical log: `n_clusters * per_cluster` records apportioned to
    /// clusters by popularity, shuffled, with ids `q0000000..` and one-second
    /// timestamps in log order.
    pub fn corpus(&self) -> Vec<QueryRecord> {
        let total = self.spec.n_clusters * self.spec.per_cluster;
        let counts = apportion(&self.popularity, total);
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5eed_c0de);
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        labels.shuffle(&mut rng);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let mut r = self.sample_record(format!("q{i:07}"), c, &mut rng);
                r.ts = i as f64;
                r
            })
            .collect()
    }
}

/// Convenience wrapper around [`PlantedModel`] with uniform popularity and
/// no families.
pub fn generate_planted_corpus(
    n_clusters: usize,
    per_cluster: usize,
    intra_sim: f64,
    dim: usize,
    seed: u64,
) -> Result<Vec<QueryRecord>> {
    let spec = PlantedSpec { n_clusters, per_cluster, intra_sim, dim, seed, ..PlantedSpec::default() };
    Ok(PlantedModel::new(spec)?.corpus())
}
