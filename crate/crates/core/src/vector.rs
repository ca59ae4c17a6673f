//! Embedding vectors and the similarity primitives built on them.
//!
//! Vectors are stored as `f32` and every reduction accumulates in `f64`.
//! Everything that enters a cache or index is normalized first, so the hot
//! path can use a plain dot product as cosine similarity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Embedding dimension of the sentence-embedding model family the system
/// was designed around.
pub const DEFAULT_DIM: usize = 768;

/// A fixed-dimension embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("empty embedding".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { values })
    }

    /// Builds a unit vector from raw values.
    pub fn normalized_from(values: Vec<f32>) -> Result<Self> {
        normalize(&Self::new(values)?)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    /// Dot product with 64-bit accumulation.
    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.values, &other.values))
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

/// Cosine similarity in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Similarity(f64);

impl Similarity {
    pub fn new(value: f64) -> Self {
        Similarity(value.clamp(-1.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub(crate) fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Single-precision dot product with eight lanes. Much faster than [`dot`]
/// but only accurate to roughly `1e-5` for unit vectors, so it is used as a
/// pre-filter whose borderline results are recomputed exactly.
#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut sum: f32 = acc.iter().sum();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        sum += x * y;
    }
    sum
}

/// Raw dot product, `f32` storage with `f64` accumulation. Callers guarantee
/// equal lengths.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators let the compiler vectorize.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] as f64 * b[j] as f64;
        acc[1] += a[j + 1] as f64 * b[j + 1] as f64;
        acc[2] += a[j + 2] as f64 * b[j + 2] as f64;
        acc[3] += a[j + 3] as f64 * b[j + 3] as f64;
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        sum += a[j] as f64 * b[j] as f64;
    }
    sum
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<Similarity> {
    check_dims(a.dim(), b.dim())?;
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    // Multiplying the norms (rather than dividing twice) keeps the result
    // exactly symmetric in its arguments.
    Ok(Similarity::new(dot(&a.values, &b.values) / (na * nb)))
}

pub fn normalize(v: &Embedding) -> Result<Embedding> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    let values = v.values.iter().map(|&x| (x as f64 / n) as f32).collect();
    Ok(Embedding { values })
}

/// Normalizes an `f64` accumulator into a unit `f32` embedding.
pub(crate) fn normalize_f64(values: &[f64]) -> Result<Embedding> {
    let n = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Embedding::new(values.iter().map(|x| (x / n) as f32).collect())
}

/// Stable 64-bit seed derived from arbitrary bytes and a caller seed.
pub(crate) fn stable_seed(bytes: &[u8], seed: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

/// Deterministic stand-in for a sentence-embedding model: the text and seed
/// are hashed into an RNG seed, a standard Gaussian vector is drawn and then
/// normalized. Distinct texts land near-orthogonal in high dimension.
pub fn synthetic_embed(text: &str, dim: usize, seed: u64) -> Embedding {
    assert!(dim >= 2, "synthetic_embed needs dim >= 2");
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(text.as_bytes(), seed));
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    // A Gaussian vector is zero with probability zero.
    normalize_f64(&raw).expect("gaussian sample is non-zero")
}

/// Draws a uniformly random unit vector.
pub(crate) fn random_unit<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return raw.into_iter().map(|x| x / n).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_identity_orthogonal_antipodal() {
        let v = e(&[0.3, -1.2, 2.0]);
        assert!((cosine_similarity(&v, &v).unwrap().value() - 1.0).abs() < 1e-12);
        let e1 = e(&[1.0, 0.0]);
        let e2 = e(&[0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap().value(), 0.0);
        let u = e(&[0.5, 0.5, -0.1]);
        let neg = e(&[-0.5, -0.5, 0.1]);
        assert!((cosine_similarity(&u, &neg).unwrap().value() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        let a = e(&[1.0, 0.0]);
        let b = e(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&a, &b),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
        let z = e(&[0.0, 0.0]);
        assert!(matches!(cosine_similarity(&a, &z), Err(Error::ZeroVector)));
    }

    #[test]
    fn normalize_cases() {
        let n = normalize(&e(&[3.0, 4.0])).unwrap();
        assert!((n.as_slice()[0] - 0.6).abs() < 1e-7);
        assert!((n.as_slice()[1] - 0.8).abs() < 1e-7);
        let again = normalize(&n).unwrap();
        assert_eq!(again, n);
        assert!(matches!(normalize(&e(&[0.0, 0.0])), Err(Error::ZeroVector)));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(Embedding::new(vec![1.0, f32::NAN]), Err(Error::NonFinite(1))));
        assert!(Embedding::new(vec![]).is_err());
    }

    #[test]
    fn synthetic_embed_is_deterministic_and_unit() {
        let a = synthetic_embed("what is rust", 768, 7);
        let b = synthetic_embed("what is rust", 768, 7);
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-6);
        let c = synthetic_embed("what is rust", 768, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_embed_distinct_texts_near_orthogonal() {
        let mut worst = 0.0f64;
        for i in 0..1000 {
            let a = synthetic_embed(&format!("text-a-{i}"), 768, 1);
            let b = synthetic_embed(&format!("text-b-{i}"), 768, 1);
            worst = worst.max(cosine_similarity(&a, &b).unwrap().value().abs());
        }
        assert!(worst < 0.2, "max |cos| = {worst}");
    }

    #[test]
    fn serde_roundtrip_validates() {
        let v = e(&[1.0, 2.0]);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, "[1.0,2.0]");
        let back: Embedding = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Embedding>("[]").is_err());
    }
}
