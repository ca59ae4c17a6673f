use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::vector::{dot, Embedding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepeatConfig {
    pub enabled: bool,
    /// Embeddings remembered per user.
    pub history: usize,
    /// Seconds a prior query stays relevant.
    pub window: f64,
    pub threshold: f64,
}

impl Default for RepeatConfig {
    fn default() -> Self {
        RepeatConfig { enabled: true, history: 8, window: 300.0, threshold: 0.95 }
    }
}

/// Flags a query as a repeat when the same user sent a near-identical one
/// recently. Repeats bypass the cache: the user presumably wants a fresh
/// answer.
#[derive(Debug, Clone, Default)]
pub struct RepeatDetector {
    cfg: RepeatConfig,
    users: HashMap<String, VecDeque<(f64, Embedding)>>,
}

impl RepeatDetector {
    pub fn new(cfg: RepeatConfig) -> Self {
        RepeatDetector { cfg, users: HashMap::new() }
    }

    /// Checks `embedding` against the user's history, then records it.
    pub fn observe(&mut self, user: &str, embedding: &Embedding, now: f64) -> bool {
        if !self.cfg.enabled || self.cfg.history == 0 {
            return false;
        }
        let ring = self.users.entry(user.to_owned()).or_default();
        let cutoff = now - self.cfg.window;
        let repeat = ring.iter().any(|(t, e)| {
            *t >= cutoff && e.dim() == embedding.dim() && dot(e.as_slice(), embedding.as_slice()) >= self.cfg.threshold
        });
        if ring.len() == self.cfg.history {
            ring.pop_front();
        }
        ring.push_back((now, embedding.clone()));
        repeat
    }
}

pub fn detect_repeat(detector: &mut RepeatDetector, user: &str, embedding: &Embedding, now: f64) -> bool {
    detector.observe(user, embedding, now)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::normalize;

    fn unit(v: &[f32]) -> Embedding {
        normalize(&Embedding::new(v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn same_user_repeat_within_window() {
        let mut d = RepeatDetector::new(RepeatConfig::default());
        let e = unit(&[1.0, 2.0]);
        assert!(!d.observe("a", &e, 0.0));
        assert!(d.observe("a", &e, 30.0));
        assert!(!d.observe("b", &e, 31.0));
        assert!(!d.observe("a", &e, 1000.0));
    }

    #[test]
    fn dissimilar_is_not_repeat() {
        let mut d = RepeatDetector::new(RepeatConfig::default());
        d.observe("a", &unit(&[1.0, 0.0]), 0.0);
        // cos = 0.5
        assert!(!d.observe("a", &unit(&[0.5, 0.75f32.sqrt()]), 1.0));
    }

    #[test]
    fn history_is_bounded() {
        let cfg = RepeatConfig { history: 2, ..Default::default() };
        let mut d = RepeatDetector::new(cfg);
        d.observe("a", &unit(&[1.0, 0.0]), 0.0);
        d.observe("a", &unit(&[0.0, 1.0]), 1.0);
        d.observe("a", &unit(&[-1.0, 0.0]), 2.0);
        assert!(!d.observe("a", &unit(&[1.0, 0.0]), 3.0));
        assert!(!RepeatDetector::new(RepeatConfig { enabled: false, ..cfg }).observe("a", &unit(&[1.0, 0.0]), 0.0));
    }
}
