use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendRole {
    Cloud,
    Edge,
}

impl fmt::Display for BackendRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendRole::Cloud => "cloud",
            BackendRole::Edge => "edge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capability {
    pub name: String,
    pub role: BackendRole,
    /// Maximum concurrent `complete` calls; `None` means unrestricted.
    pub max_concurrency: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
    /// Latency reported by the backend: measured for remote backends,
    /// simulated for mocks.
    pub latency: Duration,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("{backend}: no completion within {after:?}")]
    Timeout { backend: String, after: Duration },
    #[error("{backend}: transport failure: {message}")]
    Transport { backend: String, message: String },
    #[error("{backend}: HTTP status {status}")]
    Status { backend: String, status: u16 },
    #[error("{backend}: malformed response: {message}")]
    Malformed { backend: String, message: String },
    #[error("{backend}: empty completion")]
    EmptyCompletion { backend: String },
}

impl BackendError {
    /// Timeouts and transport failures may succeed on a second attempt.
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout { .. } | BackendError::Transport { .. }
        ) || matches!(self, BackendError::Status { status, .. } if *status >= 500 || *status == 429)
    }
}

/// A text-completion model. Implementations must return within `deadline`
/// (with a result or a `Timeout`) and be safe for concurrent calls up to
/// their declared `max_concurrency`.
pub trait ModelBackend: Send + Sync {
    fn capability(&self) -> &Capability;

    fn complete(&self, context: &str, deadline: Duration) -> Result<Completion, BackendError>;

    /// Cheap reachability check used by health reporting.
    fn probe(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Counting gate bounding in-flight calls.
#[derive(Debug)]
struct Gate {
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn acquire(&self) -> GatePermit<'_> {
        let mut n = self.in_flight.lock().expect("gate lock");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("gate lock");
        }
        *n += 1;
        GatePermit { gate: self }
    }
}

struct GatePermit<'a> {
    gate: &'a Gate,
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut n = self.gate.in_flight.lock().expect("gate lock");
        *n -= 1;
        self.gate.freed.notify_one();
    }
}

/// Shared handle to a backend that honors its declared concurrency limit.
#[derive(Clone)]
pub struct Backend {
    inner: Arc<dyn ModelBackend>,
    gate: Option<Arc<Gate>>,
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backend")
            .field("capability", self.capability())
            .finish()
    }
}

impl Backend {
    pub fn new(inner: Arc<dyn ModelBackend>) -> Self {
        let gate = inner.capability().max_concurrency.map(|limit| {
            Arc::new(Gate {
                limit: limit.max(1),
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
            })
        });
        Self { inner, gate }
    }

    pub fn from_backend<B: ModelBackend + 'static>(backend: B) -> Self {
        Self::new(Arc::new(backend))
    }

    pub fn capability(&self) -> &Capability {
        self.inner.capability()
    }

    pub fn name(&self) -> &str {
        &self.capability().name
    }

    pub fn role(&self) -> BackendRole {
        self.capability().role
    }

    pub fn complete(&self, context: &str, deadline: Duration) -> Result<Completion, BackendError> {
        let _permit = self.gate.as_ref().map(|g| g.acquire());
        self.inner.complete(context, deadline)
    }

    /// One retry on retriable failures.
    pub fn complete_with_retry(
        &self,
        context: &str,
        deadline: Duration,
    ) -> (Result<Completion, BackendError>, u32) {
        match self.complete(context, deadline) {
            Err(e) if e.is_retriable() => (self.complete(context, deadline), 2),
            other => (other, 1),
        }
    }

    pub fn probe(&self) -> Result<(), BackendError> {
        self.inner.probe()
    }
}

/// Lets a handle be wrapped by other backends, for example a recorder.
impl ModelBackend for Backend {
    fn capability(&self) -> &Capability {
        Backend::capability(self)
    }

    fn complete(&self, context: &str, deadline: Duration) -> Result<Completion, BackendError> {
        Backend::complete(self, context, deadline)
    }

    fn probe(&self) -> Result<(), BackendError> {
        Backend::probe(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        cap: Capability,
        current: AtomicUsize,
        peak: AtomicUsize,
        calls: AtomicUsize,
        fail_first: bool,
    }

    impl ModelBackend for Counting {
        fn capability(&self) -> &Capability {
            &self.cap
        }

        fn complete(&self, _: &str, _: Duration) -> Result<Completion, BackendError> {
            let call = self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail_first && call == 0 {
                return Err(BackendError::Timeout {
                    backend: "c".into(),
                    after: Duration::ZERO,
                });
            }
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(Completion {
                text: "ok".into(),
                usage: Usage::default(),
                latency: Duration::ZERO,
            })
        }
    }

    fn counting(limit: Option<usize>, fail_first: bool) -> Arc<Counting> {
        Arc::new(Counting {
            cap: Capability {
                name: "c".into(),
                role: BackendRole::Edge,
                max_concurrency: limit,
            },
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
            fail_first,
        })
    }

    #[test]
    fn declared_limit_bounds_in_flight_calls() {
        let inner = counting(Some(2), false);
        let backend = Backend::new(inner.clone());
        std::thread::scope(|s| {
            for _ in 0..8 {
                let b = backend.clone();
                s.spawn(move || b.complete("x", Duration::from_secs(1)).unwrap());
            }
        });
        assert!(inner.peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(inner.calls.load(Ordering::SeqCst), 8);
    }

    #[test]
    fn retriable_errors_are_retried_once() {
        let inner = counting(None, true);
        let backend = Backend::new(inner.clone());
        let (result, attempts) = backend.complete_with_retry("x", Duration::from_secs(1));
        assert!(result.is_ok());
        assert_eq!(attempts, 2);
        assert!(!BackendError::EmptyCompletion {
            backend: "x".into()
        }
        .is_retriable());
        assert!(BackendError::Status {
            backend: "x".into(),
            status: 503
        }
        .is_retriable());
        assert!(!BackendError::Status {
            backend: "x".into(),
            status: 400
        }
        .is_retriable());
    }
}
