//! Client for a remote sentence-embedding service.
//!
//! `POST {url}/embed` with `{"texts": [...]}` answers
//! `{"vectors": [[...]], "dim": D, "model": "..."}`. Responses are checked
//! for count, dimension and unit norm; failures surface as errors rather
//! than falling back to synthetic embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sim::{http_agent, post_json, with_retries};
use crate::vector::Embedding;

pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedClientConfig {
    pub url: String,
    /// Expected embedding dimension.
    pub dim: usize,
    pub timeout: f64,
    pub attempts: usize,
    /// First retry delay in seconds; doubles on each retry.
    pub backoff: f64,
    /// Texts per request.
    pub batch_size: usize,
}

impl Default for EmbedClientConfig {
    fn default() -> Self {
        EmbedClientConfig {
            url: "http://127.0.0.1:8080".into(),
            dim: crate::vector::DEFAULT_DIM,
            timeout: 30.0,
            attempts: 3,
            backoff: 0.2,
            batch_size: 256,
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
    dim: usize,
    #[allow(dead_code)]
    model: String,
}

pub struct EmbedClient {
    cfg: EmbedClientConfig,
    agent: ureq::Agent,
}

impl EmbedClient {
    pub fn new(cfg: EmbedClientConfig) -> Result<Self> {
        if cfg.attempts == 0 || cfg.batch_size == 0 || cfg.dim == 0 {
            return Err(invalid("attempts, batch_size and dim must be positive"));
        }
        if !(cfg.timeout > 0.0) {
            return Err(invalid("timeout must be positive"));
        }
        Ok(EmbedClient { agent: http_agent(cfg.timeout), cfg })
    }

    pub fn config(&self) -> &EmbedClientConfig {
        &self.cfg
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let url = format!("{}/embed", self.cfg.url.trim_end_matches('/'));
        let resp: EmbedResponse =
            with_retries(self.cfg.attempts, self.cfg.backoff, || post_json(&self.agent, &url, &EmbedRequest { texts }))?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::Http(format!("sent {} texts, got {} vectors", texts.len(), resp.vectors.len())));
        }
        if resp.dim != self.cfg.dim {
            return Err(Error::DimensionMismatch { expected: self.cfg.dim, got: resp.dim });
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.cfg.dim {
                    return Err(Error::DimensionMismatch { expected: self.cfg.dim, got: v.len() });
                }
                let e = Embedding::new(v)?;
                let n = e.norm();
                if (n - 1.0).abs() > NORM_TOLERANCE {
                    return Err(Error::Http(format!("server returned a vector of norm {n}")));
                }
                Ok(e)
            })
            .collect()
    }
}

/// Embeds `texts` in order, batching by the client's batch size.
pub fn fetch_embeddings(client: &EmbedClient, texts: &[String]) -> Result<Vec<Embedding>> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(client.cfg.batch_size) {
        out.extend(client.embed_batch(chunk)?);
    }
    Ok(out)
}
