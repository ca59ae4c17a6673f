//! Offline clustering of historical queries into centroids.
//!
//! Community detection follows the threshold semantics used throughout the
//! sentence-embedding ecosystem: every vector proposes the community of all
//! vectors at cosine >= `theta_c` from it, proposals are accepted greedily
//! from the largest down, and members already taken by a larger community
//! are dropped from smaller ones. Vectors left over become singletons so no
//! query is unrepresentable.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::QueryRecord;
use crate::error::{invalid, Error, Result};
use crate::vector::{dot, dot_f32, normalize_f64, Embedding};

/// Default clustering threshold.
pub const DEFAULT_THETA_C: f64 = 0.86;
pub const DEFAULT_MIN_COMMUNITY_SIZE: usize = 2;
/// Fraction of the initial query set that triggers a re-clustering pass.
pub const DEFAULT_RECLUSTER_FRACTION: f64 = 0.10;

/// Per-centroid reference counter with a reserved "infinite" value that
/// marks a centroid just brought in from the repository.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct AccessCount(u64);

impl AccessCount {
    pub const ZERO: AccessCount = AccessCount(0);
    pub const INFINITE: AccessCount = AccessCount(u64::MAX);

    pub fn new(n: u64) -> Self {
        AccessCount(n.min(u64::MAX - 1))
    }

    pub fn is_infinite(self) -> bool {
        self == Self::INFINITE
    }

    pub fn get(self) -> Option<u64> {
        (!self.is_infinite()).then_some(self.0)
    }

    pub(crate) fn raw(self) -> u64 {
        self.0
    }

    pub(crate) fn from_raw(raw: u64) -> Self {
        AccessCount(raw)
    }

    /// Counts one reference; the sentinel absorbs increments and finite
    /// counts saturate just below it.
    pub fn incremented(self) -> Self {
        if self.is_infinite() {
            self
        } else {
            AccessCount((self.0 + 1).min(u64::MAX - 1))
        }
    }
}

impl Serialize for AccessCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.get() {
            Some(n) => s.serialize_u64(n),
            None => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for AccessCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            N(u64),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::N(n) => Ok(AccessCount::new(n)),
            Repr::S(s) if s == "inf" => Ok(AccessCount::INFINITE),
            Repr::S(s) => Err(serde::de::Error::custom(format!("bad access_count {s:?}"))),
        }
    }
}

/// The unit of caching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub id: u64,
    pub vector: Embedding,
    pub output: String,
    /// Number of queries represented; fractional once decay has applied.
    pub cluster_size: f64,
    pub access_count: AccessCount,
    #[serde(default)]
    pub created_at: f64,
}

impl Centroid {
    pub fn new(id: u64, vector: Embedding, output: impl Into<String>, cluster_size: f64) -> Self {
        Centroid {
            id,
            vector,
            output: output.into(),
            cluster_size,
            access_count: AccessCount::ZERO,
            created_at: 0.0,
        }
    }
}

/// Result of [`compute_centroid`]; `degenerate` is set when the member mean
/// vanished and the first member's embedding was used instead.
#[derive(Debug, Clone)]
pub struct CentroidBuild {
    pub centroid: Centroid,
    pub degenerate: bool,
}

fn embedding_of(r: &QueryRecord) -> Result<&Embedding> {
    r.embedding
        .as_ref()
        .ok_or_else(|| invalid(format!("record {} has no embedding", r.id)))
}

/// Threshold community detection over unit vectors. Returns index sets:
/// accepted communities first (largest first), then singletons in input
/// order. Members inside each set are ascending.
pub fn community_detect(
    vectors: &[Embedding],
    theta_c: f64,
    min_community_size: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(theta_c > 0.0 && theta_c < 1.0) {
        return Err(invalid(format!("theta_c must be in (0,1), got {theta_c}")));
    }
    if min_community_size == 0 {
        return Err(invalid("min_community_size must be >= 1"));
    }
    if vectors.is_empty() {
        return Ok(Vec::new());
    }
    let dim = vectors[0].dim();
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: v.dim() });
    }

    let neighbors = threshold_neighbors(vectors, theta_c);
    let mut candidates: Vec<(usize, Vec<usize>)> = neighbors
        .into_iter()
        .enumerate()
        .filter(|(_, m)| m.len() >= min_community_size)
        .collect();
    candidates.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let mut taken = vec![false; vectors.len()];
    let mut out = Vec::new();
    for (_, members) in candidates {
        let fresh: Vec<usize> = members.into_iter().filter(|&j| !taken[j]).collect();
        if fresh.len() >= min_community_size {
            for &j in &fresh {
                taken[j] = true;
            }
            out.push(fresh);
        }
    }
    out.extend((0..vectors.len()).filter(|&j| !taken[j]).map(|j| vec![j]));
    Ok(out)
}

/// Half-width of the band around the threshold inside which the fast
/// single-precision similarity is not trusted.
const F32_GUARD: f32 = 1e-3;

/// For every vector, the ascending list of indices (itself included) whose
/// similarity is at least `theta_c`. Each unordered pair is scored once; rows
/// are split across threads and merged afterwards.
fn threshold_neighbors(vectors: &[Embedding], theta_c: f64) -> Vec<Vec<usize>> {
    let n = vectors.len();
    let lo = theta_c as f32 - F32_GUARD;
    let hi = theta_c as f32 + F32_GUARD;
    let upper: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let vi = vectors[i].as_slice();
            (i + 1..n)
                .filter(|&j| {
                    let vj = vectors[j].as_slice();
                    let fast = dot_f32(vi, vj);
                    if fast < lo {
                        false
                    } else if fast > hi {
                        true
                    } else {
                        dot(vi, vj) >= theta_c
                    }
                })
                .collect()
        })
        .collect();
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, row) in upper.iter().enumerate() {
        for &j in row {
            lists[j].push(i);
        }
    }
    for (i, row) in upper.into_iter().enumerate() {
        lists[i].push(i);
        lists[i].extend(row);
    }
    lists
}

/// Normalized mean of the members' embeddings; the cached output is the
/// response of the member closest to that mean (ties by lowest record id).
pub fn compute_centroid(members: &[&QueryRecord], id: u64) -> Result<CentroidBuild> {
    let first = members.first().ok_or_else(|| invalid("empty cluster"))?;
    let dim = embedding_of(first)?.dim();
    let mut sum = vec![0.0f64; dim];
    for m in members {
        let e = embedding_of(m)?;
        if e.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: e.dim() });
        }
        for (s, &x) in sum.iter_mut().zip(e.as_slice()) {
            *s += x as f64;
        }
    }
    let (vector, degenerate) = match normalize_f64(&sum) {
        Ok(v) => (v, false),
        Err(_) => {
            log::warn!("cluster {id}: member mean is zero, using first member's embedding");
            (embedding_of(first)?.clone(), true)
        }
    };

    let mut best: Option<(f64, &QueryRecord)> = None;
    for m in members {
        let s = dot(vector.as_slice(), embedding_of(m)?.as_slice());
        best = match best {
            Some((bs, br)) if bs > s || (bs == s && br.id <= m.id) => Some((bs, br)),
            _ => Some((s, m)),
        };
    }
    let rep = best.expect("non-empty").1;
    let output = rep
        .response
        .clone()
        .ok_or_else(|| invalid(format!("record {} has no response", rep.id)))?;
    Ok(CentroidBuild {
        centroid: Centroid {
            id,
            vector,
            output,
            cluster_size: members.len() as f64,
            access_count: AccessCount::ZERO,
            created_at: 0.0,
        },
        degenerate,
    })
}

/// Knobs for one repository build.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub theta_c: f64,
    pub min_community_size: usize,
    /// Centroid ids are `id_base + index`, letting successive builds hand out
    /// disjoint ids.
    pub id_base: u64,
    pub built_at: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            theta_c: DEFAULT_THETA_C,
            min_community_size: DEFAULT_MIN_COMMUNITY_SIZE,
            id_base: 0,
            built_at: 0.0,
        }
    }
}

/// Offline store of clustering results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidRepository {
    pub centroids: Vec<Centroid>,
    pub theta_c: f64,
    pub source_query_count: u64,
    pub built_at: f64,
}

impl CentroidRepository {
    pub fn empty(theta_c: f64) -> Self {
        CentroidRepository { centroids: Vec::new(), theta_c, source_query_count: 0, built_at: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.centroids.first().map(|c| c.vector.dim())
    }

    /// Histogram of integer cluster sizes as `(size, count)` pairs.
    pub fn size_histogram(&self) -> Vec<(u64, usize)> {
        let mut h = std::collections::BTreeMap::new();
        for c in &self.centroids {
            *h.entry(c.cluster_size.round() as u64).or_insert(0usize) += 1;
        }
        h.into_iter().collect()
    }

    /// Number of centroids that came from communities of two or more.
    pub fn community_count(&self) -> usize {
        self.centroids.iter().filter(|c| c.cluster_size >= 2.0).count()
    }
}

pub fn build_repository(
    log: &[QueryRecord],
    theta_c: f64,
    min_community_size: usize,
) -> Result<CentroidRepository> {
    build_repository_with(log, &ClusterParams { theta_c, min_community_size, ..Default::default() })
}

pub fn build_repository_with(log: &[QueryRecord], params: &ClusterParams) -> Result<CentroidRepository> {
    let vectors: Vec<Embedding> = log
        .iter()
        .map(|r| embedding_of(r).cloned())
        .collect::<Result<_>>()?;
    if let Some(r) = log.iter().find(|r| r.response.is_none()) {
        return Err(invalid(format!("record {} has no response", r.id)));
    }
    let groups = community_detect(&vectors, params.theta_c, params.min_community_size)?;
    let mut centroids = Vec::with_capacity(groups.len());
    for (k, g) in groups.iter().enumerate() {
        let members: Vec<&QueryRecord> = g.iter().map(|&i| &log[i]).collect();
        let mut c = compute_centroid(&members, params.id_base + k as u64)?.centroid;
        c.created_at = params.built_at;
        centroids.push(c);
    }
    Ok(CentroidRepository {
        centroids,
        theta_c: params.theta_c,
        source_query_count: log.len() as u64,
        built_at: params.built_at,
    })
}

pub fn should_recluster(new_query_count: usize, initial_query_count: usize, trigger_fraction: f64) -> bool {
    new_query_count as f64 >= trigger_fraction * initial_query_count as f64
}

// ---------------------------------------------------------------------------
// Snapshot file

const MAGIC: &[u8; 4] = b"CCRP";
const VERSION: u32 = 1;

/// Binary snapshot layout, all little-endian:
///
/// ```text
/// header:   magic "CCRP" | version u32 | dim u32 | theta_c f64 | count u64
///           | source_query_count u64 | built_at f64
/// record:   id u64 | vector dim x f32 | cluster_size f64
///           | output_len u32 | output bytes (UTF-8)
/// ```
pub fn encode_snapshot(repo: &CentroidRepository) -> Result<Vec<u8>> {
    let dim = repo.dim().unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&repo.theta_c.to_le_bytes());
    out.extend_from_slice(&(repo.centroids.len() as u64).to_le_bytes());
    out.extend_from_slice(&repo.source_query_count.to_le_bytes());
    out.extend_from_slice(&repo.built_at.to_le_bytes());
    for c in &repo.centroids {
        if c.vector.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: c.vector.dim() });
        }
        out.extend_from_slice(&c.id.to_le_bytes());
        for v in c.vector.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.cluster_size.to_le_bytes());
        let bytes = c.output.as_bytes();
        let len = u32::try_from(bytes.len()).map_err(|_| Error::Snapshot("output too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Snapshot(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
}

pub fn decode_snapshot(buf: &[u8]) -> Result<CentroidRepository> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let dim = cur.u32()? as usize;
    let theta_c = cur.f64()?;
    let count = cur.u64()?;
    let source_query_count = cur.u64()?;
    let built_at = cur.f64()?;
    let mut centroids = Vec::new();
    for _ in 0..count {
        let id = cur.u64()?;
        let values = (0..dim).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
        let cluster_size = cur.f64()?;
        let len = cur.u32()? as usize;
        let output = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Snapshot(e.to_string()))?
            .to_owned();
        let mut c = Centroid::new(id, Embedding::new(values)?, output, cluster_size);
        c.created_at = built_at;
        centroids.push(c);
    }
    if cur.pos != buf.len() {
        return Err(Error::Snapshot("trailing bytes".into()));
    }
    Ok(CentroidRepository { centroids, theta_c, source_query_count, built_at })
}

pub fn save_snapshot(repo: &CentroidRepository, path: impl AsRef<Path>) -> Result<()> {
    crate::util::write_atomic(path, &encode_snapshot(repo)?)
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<CentroidRepository> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_snapshot(&buf)
}

/// Human-readable mirror of the snapshot.
pub fn save_json_dump(repo: &CentroidRepository, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(repo)?;
    buf.write_all(b"\n")?;
    crate::util::write_atomic(path, &buf)
}
