use std::io::BufRead;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Empirical distribution of generated-token counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenHistogram(Vec<u32>);

impl TokenHistogram {
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.is_empty() {
            return Err(invalid("token histogram is empty"));
        }
        if counts.contains(&0) {
            return Err(invalid("token counts must be >= 1"));
        }
        Ok(TokenHistogram(counts))
    }

    pub fn degenerate(n: u32) -> Result<Self> {
        Self::new(vec![n])
    }

    /// One positive integer per line; blank lines are skipped.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut counts = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let n: u32 = t.parse().map_err(|e| Error::Parse { line: i + 1, message: format!("{e}") })?;
            if n == 0 {
                return Err(Error::Parse { line: i + 1, message: "token count must be >= 1".into() });
            }
            counts.push(n);
        }
        Self::new(counts)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        self.0[rng.random_range(0..self.0.len())]
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().map(|&n| n as f64).sum::<f64>() / self.0.len() as f64
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }
}

impl TryFrom<Vec<u32>> for TokenHistogram {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TokenHistogram> for Vec<u32> {
    fn from(h: TokenHistogram) -> Self {
        h.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockLlmConfig {
    pub ttft: f64,
    pub tbt: f64,
    pub output_tokens: TokenHistogram,
    pub servers: usize,
    /// Requests allowed to wait for a server; `None` is unbounded.
    pub queue_bound: Option<usize>,
}

impl Default for MockLlmConfig {
    fn default() -> Self {
        MockLlmConfig {
            ttft: 0.05,
            tbt: 0.05,
            output_tokens: TokenHistogram(vec![240]),
            servers: 1,
            queue_bound: None,
        }
    }
}

impl MockLlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ttft > 0.0 && self.tbt > 0.0) {
            return Err(invalid("ttft and tbt must be positive"));
        }
        if self.servers == 0 {
            return Err(invalid("servers must be >= 1"));
        }
        Ok(())
    }

    /// Mean unloaded service time over the token histogram.
    pub fn mean_service_time(&self) -> f64 {
        let n = self.output_tokens.counts().len() as f64;
        self.output_tokens.counts().iter().map(|&t| mock_llm_service_time(self, t)).sum::<f64>() / n
    }
}

/// `ttft + tbt * (n_tokens - 1)`.
pub fn mock_llm_service_time(cfg: &MockLlmConfig, n_tokens: u32) -> f64 {
    cfg.ttft + cfg.tbt * n_tokens.max(1).saturating_sub(1) as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub n_tokens: u32,
}

/// Something that turns a prompt into a response in wall-clock time.
pub trait LlmBackend: Send + Sync {
    fn generate(&self, text: &str) -> Result<Generation>;
}

/// Wall-clock stand-in for an LLM: `servers` slots, each busy for the
/// mock service time of a sampled token count.
pub struct MockBackend {
    cfg: MockLlmConfig,
    slots: Vec<Mutex<()>>,
    rng: Mutex<rand_chacha::ChaCha8Rng>,
    next: std::sync::atomic::AtomicUsize,
}

impl MockBackend {
    pub fn new(cfg: MockLlmConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        cfg.validate()?;
        let slots = (0..cfg.servers).map(|_| Mutex::new(())).collect();
        Ok(MockBackend {
            cfg,
            slots,
            rng: Mutex::new(rand_chacha::ChaCha8Rng::seed_from_u64(seed)),
            next: Default::default(),
        })
    }
}

impl LlmBackend for MockBackend {
    fn generate(&self, text: &str) -> Result<Generation> {
        let n = self.cfg.output_tokens.sample(&mut *self.rng.lock().expect("poisoned"));
        let i = self.next.fetch_add(1, std::sync::atomic::Ordering::Relaxed) % self.slots.len();
        let _busy = self.slots[i].lock().expect("poisoned");
        thread::sleep(Duration::from_secs_f64(mock_llm_service_time(&self.cfg, n)));
        Ok(Generation { text: format!("generated for: {text}"), n_tokens: n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    /// Base URL; requests go to `{url}/generate`.
    pub url: String,
    pub timeout: f64,
    pub attempts: usize,
    pub backoff: f64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig { url: "http://127.0.0.1:8000".into(), timeout: 60.0, attempts: 3, backoff: 0.2 }
    }
}

/// `POST {url}/generate` with `{"text": ...}`, expecting
/// `{"text": ..., "n_tokens": ...}`.
pub struct HttpBackend {
    cfg: HttpBackendConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    text: &'a str,
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self> {
        if cfg.attempts == 0 {
            return Err(invalid("attempts must be >= 1"));
        }
        if !(cfg.timeout > 0.0) {
            return Err(invalid("timeout must be positive"));
        }
        Ok(HttpBackend { agent: http_agent(cfg.timeout), cfg })
    }
}

pub(crate) fn http_agent(timeout: f64) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(timeout)))
        .http_status_as_error(false)
        .build()
        .into()
}

/// Runs `f` up to `attempts` times with exponential backoff starting at
/// `backoff` seconds, returning the last error.
pub(crate) fn with_retries<T>(attempts: usize, backoff: f64, mut f: impl FnMut() -> Result<T>) -> Result<T> {
    let mut delay = backoff;
    let mut last = None;
    for i in 0..attempts {
        match f() {
            Ok(v) => return Ok(v),
            Err(e) => {
                log::warn!("attempt {}/{} failed: {e}", i + 1, attempts);
                last = Some(e);
            }
        }
        if i + 1 < attempts {
            thread::sleep(Duration::from_secs_f64(delay));
            delay *= 2.0;
        }
    }
    Err(last.unwrap_or_else(|| invalid("no attempts made")))
}

pub(crate) fn post_json<Req: Serialize, Resp: serde::de::DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    body: &Req,
) -> Result<Resp> {
    let mut resp = agent.post(url).send_json(body).map_err(|e| Error::Http(e.to_string()))?;
    let status = resp.status();
    if !status.is_success() {
        return Err(Error::Http(format!("{url} returned {status}")));
    }
    resp.body_mut().read_json::<Resp>().map_err(|e| Error::Http(e.to_string()))
}

impl LlmBackend for HttpBackend {
    fn generate(&self, text: &str) -> Result<Generation> {
        let url = format!("{}/generate", self.cfg.url.trim_end_matches('/'));
        let started = Instant::now();
        let g: Generation = with_retries(self.cfg.attempts, self.cfg.backoff, || {
            post_json(&self.agent, &url, &GenerateRequest { text })
        })?;
        log::debug!("generate took {:.3}s", started.elapsed().as_secs_f64());
        Ok(g)
    }
}
