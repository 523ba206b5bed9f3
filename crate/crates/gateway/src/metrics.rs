use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use std::sync::OnceLock;
use std::time::Duration;

use serde::Serialize;
use veil_core::collab::StageTokens;
use veil_core::gating::Mode;

/// Upper bounds in seconds; a final `+Inf` bucket is implied.
pub const BUCKETS: [f64; 12] = [
    0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0, 10.0, 30.0,
];

#[derive(Debug, Default)]
pub struct Histogram {
    counts: [AtomicU64; BUCKETS.len() + 1],
    sum_micros: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    /// Upper bound in seconds, `"+Inf"` for the last bucket.
    pub le: serde_json::Value,
    /// Observations at or below `le`.
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramSnapshot {
    pub buckets: Vec<Bucket>,
    pub count: u64,
    pub sum_seconds: f64,
}

impl Histogram {
    pub fn observe(&self, d: Duration) {
        let s = d.as_secs_f64();
        let i = BUCKETS
            .iter()
            .position(|&b| s <= b)
            .unwrap_or(BUCKETS.len());
        self.counts[i].fetch_add(1, Relaxed);
        self.sum_micros.fetch_add(d.as_micros() as u64, Relaxed);
    }

    pub fn snapshot(&self) -> HistogramSnapshot {
        let mut running = 0;
        let mut buckets = Vec::with_capacity(self.counts.len());
        for (i, c) in self.counts.iter().enumerate() {
            running += c.load(Relaxed);
            let le = BUCKETS
                .get(i)
                .map_or(serde_json::json!("+Inf"), |b| serde_json::json!(b));
            buckets.push(Bucket { le, count: running });
        }
        HistogramSnapshot {
            buckets,
            count: running,
            sum_seconds: self.sum_micros.load(Relaxed) as f64 / 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifierStatus {
    /// `pass`, `fail` or `error`.
    pub status: String,
    pub epsilon_total: f64,
    pub alpha: f64,
    pub grid_points: usize,
    pub max_log_ratio: Option<f64>,
}

#[derive(Debug, Default)]
pub struct Metrics {
    by_mode: [AtomicU64; 3],
    rejected: AtomicU64,
    backend_failures: AtomicU64,
    privacy_faults: AtomicU64,
    perturb: Histogram,
    cloud: Histogram,
    edge: Histogram,
    total: Histogram,
    cloud_prompt_tokens: AtomicU64,
    cloud_completion_tokens: AtomicU64,
    edge_prompt_tokens: AtomicU64,
    edge_completion_tokens: AtomicU64,
    verifier: OnceLock<VerifierStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeCounts {
    pub cloud: u64,
    pub collab: u64,
    pub local: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorCounts {
    pub rejected: u64,
    pub backend_failures: u64,
    pub privacy_faults: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencySnapshot {
    pub perturb: HistogramSnapshot,
    pub cloud: HistogramSnapshot,
    pub edge: HistogramSnapshot,
    pub total: HistogramSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenTotals {
    pub cloud_prompt: u64,
    pub cloud_completion: u64,
    pub edge_prompt: u64,
    pub edge_completion: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub requests_served: u64,
    pub requests_by_mode: ModeCounts,
    pub errors: ErrorCounts,
    pub latency_seconds: LatencySnapshot,
    pub tokens: TokenTotals,
    pub verifier: Option<VerifierStatus>,
}

impl Metrics {
    pub fn record_served(
        &self,
        mode: Mode,
        perturb: Duration,
        cloud: Duration,
        edge: Duration,
        total: Duration,
        tokens: &StageTokens,
    ) {
        self.by_mode[mode.index()].fetch_add(1, Relaxed);
        if perturb > Duration::ZERO {
            self.perturb.observe(perturb);
        }
        if cloud > Duration::ZERO {
            self.cloud.observe(cloud);
        }
        if edge > Duration::ZERO {
            self.edge.observe(edge);
        }
        self.total.observe(total);
        self.cloud_prompt_tokens
            .fetch_add(tokens.cloud.prompt_tokens, Relaxed);
        self.cloud_completion_tokens
            .fetch_add(tokens.cloud.completion_tokens, Relaxed);
        self.edge_prompt_tokens
            .fetch_add(tokens.edge.prompt_tokens, Relaxed);
        self.edge_completion_tokens
            .fetch_add(tokens.edge.completion_tokens, Relaxed);
    }

    pub fn record_rejected(&self) {
        self.rejected.fetch_add(1, Relaxed);
    }

    pub fn record_backend_failure(&self) {
        self.backend_failures.fetch_add(1, Relaxed);
    }

    pub fn record_privacy_fault(&self) {
        self.privacy_faults.fetch_add(1, Relaxed);
    }

    pub fn set_verifier(&self, status: VerifierStatus) {
        let _ = self.verifier.set(status);
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let by_mode: Vec<u64> = self.by_mode.iter().map(|c| c.load(Relaxed)).collect();
        MetricsSnapshot {
            requests_served: by_mode.iter().sum(),
            requests_by_mode: ModeCounts {
                cloud: by_mode[Mode::Cloud.index()],
                collab: by_mode[Mode::Collab.index()],
                local: by_mode[Mode::Local.index()],
            },
            errors: ErrorCounts {
                rejected: self.rejected.load(Relaxed),
                backend_failures: self.backend_failures.load(Relaxed),
                privacy_faults: self.privacy_faults.load(Relaxed),
            },
            latency_seconds: LatencySnapshot {
                perturb: self.perturb.snapshot(),
                cloud: self.cloud.snapshot(),
                edge: self.edge.snapshot(),
                total: self.total.snapshot(),
            },
            tokens: TokenTotals {
                cloud_prompt: self.cloud_prompt_tokens.load(Relaxed),
                cloud_completion: self.cloud_completion_tokens.load(Relaxed),
                edge_prompt: self.edge_prompt_tokens.load(Relaxed),
                edge_completion: self.edge_completion_tokens.load(Relaxed),
            },
            verifier: self.verifier.get().cloned(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_metrics_are_zero() {
        let s = Metrics::default().snapshot();
        assert_eq!(s.requests_served, 0);
        assert_eq!(
            s.errors,
            ErrorCounts {
                rejected: 0,
                backend_failures: 0,
                privacy_faults: 0
            }
        );
        assert!(s.latency_seconds.total.buckets.iter().all(|b| b.count == 0));
        assert_eq!(s.latency_seconds.total.buckets.len(), BUCKETS.len() + 1);
        assert!(s.verifier.is_none());
    }

    #[test]
    fn histogram_buckets_are_cumulative() {
        let h = Histogram::default();
        for ms in [1, 7, 7, 60, 400, 3_000, 45_000] {
            h.observe(Duration::from_millis(ms));
        }
        let s = h.snapshot();
        let counts: Vec<u64> = s.buckets.iter().map(|b| b.count).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(counts, vec![1, 3, 3, 3, 4, 4, 5, 5, 5, 6, 6, 6, 7]);
        assert_eq!(s.count, 7);
        assert_eq!(s.buckets.last().unwrap().le, serde_json::json!("+Inf"));
        assert!((s.sum_seconds - 48.475).abs() < 1e-9);
    }

    #[test]
    fn boundary_lands_in_its_bucket() {
        let h = Histogram::default();
        h.observe(Duration::from_millis(10));
        assert_eq!(h.snapshot().buckets[1].count, 1);
        assert_eq!(h.snapshot().buckets[0].count, 0);
    }
}
