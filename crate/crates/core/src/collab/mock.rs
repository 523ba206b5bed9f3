//! Deterministic in-process backends for tests and offline runs.
//!
//! Latencies are simulated from token counts so reports stay reproducible.

use std::sync::Mutex;
use std::time::Duration;

use super::{BackendError, BackendRole, Capability, Completion, ModelBackend, Usage};
use crate::domain::{token_count, CategoryTable, PatternSpec};
use crate::profiler::detect_entities;

const TASK_MARK: &str = "### Task\nPrompt: ";
const SKETCH_MARK: &str = "\nSketch:\n";
const RESPONSE_MARK: &str = "\nResponse:\n";

const INTENTS: [(&str, &[&str], [&str; 3]); 3] = [
    (
        "itinerary request",
        &[
            "trip",
            "travel",
            "visit",
            "itinerary",
            "tour",
            "vacation",
            "holiday",
            "sightseeing",
            "flight",
            "hotel",
        ],
        [
            "key sights grouped by area",
            "getting around and timing",
            "where to eat and stay",
        ],
    ),
    (
        "health guidance",
        &[
            "doctor",
            "diagnosed",
            "symptoms",
            "medication",
            "treatment",
            "health",
            "clinic",
            "hospital",
            "tested",
            "therapy",
            "dose",
        ],
        [
            "what the condition involves",
            "questions to raise with a clinician",
            "day to day self-care",
        ],
    ),
    (
        "financial assistance",
        &[
            "account", "bank", "transfer", "loan", "card", "balance", "payment", "mortgage",
            "deposit", "savings", "credit",
        ],
        [
            "what the bank needs to know",
            "timelines and fees to expect",
            "steps to resolve or follow up",
        ],
    ),
];

const GENERAL: (&str, [&str; 3]) = (
    "general explanation",
    [
        "core idea in plain terms",
        "a concrete example",
        "common misconceptions",
    ],
);

/// Intent phrase and canned points for a prompt, by keyword votes.
pub fn classify(text: &str) -> (&'static str, [&'static str; 3]) {
    let words: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let mut best = (0, GENERAL);
    for (intent, keys, points) in INTENTS {
        let hits = words.iter().filter(|w| keys.contains(&w.as_str())).count();
        if hits > best.0 {
            best = (hits, (intent, points));
        }
    }
    best.1
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Text after the last task marker, up to `end`.
fn task_field<'a>(context: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let task = &context[context.rfind(TASK_MARK)? + TASK_MARK.len()..];
    let from = task.find(start)? + start.len();
    let rest = &task[from..];
    Some(&rest[..rest.find(end)?])
}

fn usage(context: &str, text: &str) -> Usage {
    Usage {
        prompt_tokens: token_count(context) as u64,
        completion_tokens: token_count(text) as u64,
    }
}

/// Simulated latency: fixed overhead plus per-token prefill and decode cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    pub overhead: Duration,
    pub per_prompt_token: Duration,
    pub per_completion_token: Duration,
}

impl LatencyModel {
    pub const CLOUD: Self = Self {
        overhead: Duration::from_millis(300),
        per_prompt_token: Duration::from_micros(500),
        per_completion_token: Duration::from_millis(20),
    };
    pub const EDGE: Self = Self {
        overhead: Duration::from_millis(50),
        per_prompt_token: Duration::from_millis(2),
        per_completion_token: Duration::from_millis(60),
    };

    pub fn latency(&self, usage: Usage) -> Duration {
        self.overhead
            + self.per_prompt_token * usage.prompt_tokens as u32
            + self.per_completion_token * usage.completion_tokens as u32
    }
}

fn completion(context: &str, text: String, model: LatencyModel) -> Completion {
    let usage = usage(context, &text);
    Completion {
        latency: model.latency(usage),
        usage,
        text,
    }
}

/// Cloud stand-in: extracts a sketch from the task prompt, or answers a bare
/// prompt directly.
#[derive(Debug, Clone)]
pub struct MockCloud {
    cap: Capability,
}

impl MockCloud {
    pub fn new(name: &str) -> Self {
        Self {
            cap: Capability {
                name: name.into(),
                role: BackendRole::Cloud,
                max_concurrency: None,
            },
        }
    }
}

impl ModelBackend for MockCloud {
    fn capability(&self) -> &Capability {
        &self.cap
    }

    fn complete(&self, context: &str, _deadline: Duration) -> Result<Completion, BackendError> {
        let text = match task_field(context, "", SKETCH_MARK) {
            Some(task) => {
                let (intent, points) = classify(task);
                format!(
                    "INTENT: {intent}\n- {}\n- {}\n- {}",
                    points[0], points[1], points[2]
                )
            }
            None => {
                let (intent, points) = classify(context);
                format!(
                    "{}:\n1. {}\n2. {}\n3. {}",
                    capitalize(intent),
                    capitalize(points[0]),
                    capitalize(points[1]),
                    capitalize(points[2])
                )
            }
        };
        Ok(completion(context, text, LatencyModel::CLOUD))
    }
}

/// Edge stand-in: fuses sketch points with the entities it finds in the
/// original prompt, or answers a bare prompt from canned points.
#[derive(Debug, Clone)]
pub struct MockEdge {
    cap: Capability,
    table: CategoryTable,
}

impl MockEdge {
    pub fn new(name: &str, table: CategoryTable) -> Self {
        Self {
            cap: Capability {
                name: name.into(),
                role: BackendRole::Edge,
                max_concurrency: None,
            },
            table,
        }
    }

    fn fuse(&self, prompt: &str, intent: &str, points: &[String]) -> String {
        let surfaces: Vec<String> = detect_entities(prompt, &self.table)
            .entities
            .into_iter()
            .map(|e| e.surface)
            .collect();
        let mut out = capitalize(intent);
        if !surfaces.is_empty() {
            out.push_str(" for ");
            out.push_str(&surfaces.join(", "));
        }
        out.push(':');
        for (i, p) in points.iter().enumerate() {
            out.push_str(&format!("\n{}. {p}", i + 1));
            if !surfaces.is_empty() {
                out.push_str(&format!(" ({})", surfaces[i % surfaces.len()]));
            }
        }
        out
    }
}

impl ModelBackend for MockEdge {
    fn capability(&self) -> &Capability {
        &self.cap
    }

    fn complete(&self, context: &str, _deadline: Duration) -> Result<Completion, BackendError> {
        let parts = task_field(context, "", SKETCH_MARK).zip(task_field(
            context,
            SKETCH_MARK,
            RESPONSE_MARK,
        ));
        let text = match parts {
            Some((prompt, sketch_text)) => {
                let mut lines = sketch_text.lines();
                let intent = lines
                    .next()
                    .and_then(|l| l.strip_prefix("INTENT:"))
                    .map(str::trim)
                    .unwrap_or("answer");
                let points: Vec<String> = lines
                    .filter_map(|l| l.strip_prefix("- "))
                    .map(str::to_string)
                    .collect();
                self.fuse(prompt, intent, &points)
            }
            None => {
                let (intent, points) = classify(context);
                let points: Vec<String> = points.iter().map(|p| p.to_string()).collect();
                self.fuse(context, intent, &points)
            }
        };
        Ok(completion(context, text, LatencyModel::EDGE))
    }
}

type Script = dyn Fn(&str) -> Result<String, BackendError> + Send + Sync;

/// Backend driven by a closure over the context.
pub struct ScriptedBackend {
    cap: Capability,
    script: Box<Script>,
}

impl ScriptedBackend {
    pub fn new<F>(name: &str, role: BackendRole, script: F) -> Self
    where
        F: Fn(&str) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        Self {
            cap: Capability {
                name: name.into(),
                role,
                max_concurrency: None,
            },
            script: Box::new(script),
        }
    }

    pub fn cloud<F>(name: &str, script: F) -> Self
    where
        F: Fn(&str) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        Self::new(name, BackendRole::Cloud, script)
    }

    pub fn edge<F>(name: &str, script: F) -> Self
    where
        F: Fn(&str) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        Self::new(name, BackendRole::Edge, script)
    }
}

impl ModelBackend for ScriptedBackend {
    fn capability(&self) -> &Capability {
        &self.cap
    }

    fn complete(&self, context: &str, _deadline: Duration) -> Result<Completion, BackendError> {
        let text = (self.script)(context)?;
        let model = match self.cap.role {
            BackendRole::Cloud => LatencyModel::CLOUD,
            BackendRole::Edge => LatencyModel::EDGE,
        };
        Ok(completion(context, text, model))
    }
}

/// Returns its input verbatim.
pub fn echo(name: &str, role: BackendRole) -> ScriptedBackend {
    ScriptedBackend::new(name, role, |ctx| Ok(ctx.to_string()))
}

/// Well-formed sketches that smuggle the given strings into a point.
pub fn injecting(name: &str, surfaces: Vec<String>) -> ScriptedBackend {
    ScriptedBackend::cloud(name, move |_| {
        Ok(format!(
            "INTENT: itinerary request\n- mention {}\n- keep it short",
            surfaces.join(", ")
        ))
    })
}

/// Injecting backend loaded with every gazetteer term of the table: a cloud
/// guessing common sensitive strings.
pub fn injecting_gazetteers(name: &str, table: &CategoryTable) -> ScriptedBackend {
    let terms = table
        .specs()
        .flat_map(|s| s.patterns.iter())
        .filter_map(|p| match p {
            PatternSpec::Gazetteer { gazetteer } => Some(gazetteer.clone()),
            PatternSpec::Regex { .. } => None,
        })
        .flatten()
        .collect();
    injecting(name, terms)
}

/// Non-text noise derived from the context length.
pub fn garbage(name: &str, role: BackendRole) -> ScriptedBackend {
    ScriptedBackend::new(name, role, |ctx| {
        let n = ctx.len() % 7 + 3;
        Ok("\u{fffd}}{#".repeat(n))
    })
}

/// Never reachable.
#[derive(Debug, Clone)]
pub struct Unreachable {
    cap: Capability,
}

impl Unreachable {
    pub fn new(name: &str, role: BackendRole) -> Self {
        Self {
            cap: Capability {
                name: name.into(),
                role,
                max_concurrency: None,
            },
        }
    }

    fn error(&self) -> BackendError {
        BackendError::Transport {
            backend: self.cap.name.clone(),
            message: "connection refused".into(),
        }
    }
}

impl ModelBackend for Unreachable {
    fn capability(&self) -> &Capability {
        &self.cap
    }

    fn complete(&self, _: &str, _: Duration) -> Result<Completion, BackendError> {
        Err(self.error())
    }

    fn probe(&self) -> Result<(), BackendError> {
        Err(self.error())
    }
}

/// Sleeps for `stall` (capped at the deadline) and times out if the stall
/// exceeds the deadline; otherwise delegates.
pub struct Stalling<B> {
    inner: B,
    stall: Duration,
}

impl<B: ModelBackend> Stalling<B> {
    pub fn new(inner: B, stall: Duration) -> Self {
        Self { inner, stall }
    }
}

impl<B: ModelBackend> ModelBackend for Stalling<B> {
    fn capability(&self) -> &Capability {
        self.inner.capability()
    }

    fn complete(&self, context: &str, deadline: Duration) -> Result<Completion, BackendError> {
        std::thread::sleep(self.stall.min(deadline));
        if self.stall > deadline {
            return Err(BackendError::Timeout {
                backend: self.capability().name.clone(),
                after: deadline,
            });
        }
        self.inner.complete(context, deadline)
    }
}

/// Keeps a copy of every payload sent to the wrapped backend.
pub struct Recording<B> {
    inner: B,
    payloads: Mutex<Vec<String>>,
}

impl<B: ModelBackend> Recording<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            payloads: Mutex::new(Vec::new()),
        }
    }

    pub fn payloads(&self) -> Vec<String> {
        self.payloads.lock().expect("recording lock").clone()
    }

    pub fn calls(&self) -> usize {
        self.payloads.lock().expect("recording lock").len()
    }

    /// Drains recorded payloads.
    pub fn take(&self) -> Vec<String> {
        std::mem::take(&mut *self.payloads.lock().expect("recording lock"))
    }
}

impl<B: ModelBackend> ModelBackend for Recording<B> {
    fn capability(&self) -> &Capability {
        self.inner.capability()
    }

    fn complete(&self, context: &str, deadline: Duration) -> Result<Completion, BackendError> {
        self.payloads
            .lock()
            .expect("recording lock")
            .push(context.to_string());
        self.inner.complete(context, deadline)
    }

    fn probe(&self) -> Result<(), BackendError> {
        self.inner.probe()
    }
}
