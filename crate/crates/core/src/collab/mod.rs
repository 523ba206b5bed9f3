//! Cloud sketch generation and edge refinement.

mod backend;
pub mod http;
pub mod mock;
mod spec;

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AnnotatedPrompt, CategoryTable, PrivacyBudget, RiskProfile};
use crate::ldp::{perturb_prompt, LdpError, PerturbedPrompt};

pub use backend::{
    Backend, BackendError, BackendRole, Capability, Completion, ModelBackend, Usage,
};
pub use spec::BackendSpec;

pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(30);
pub const DEFAULT_K: usize = 2;

const SKETCH_HEADER: &str = "Write a sketch of how to answer the prompt. Reply with one line \
`INTENT: <phrase>` followed by one or more lines `- <point>`. Do not copy names, places, \
numbers or other specifics from the prompt.";

const REPAIR_INSTRUCTION: &str = "Your previous reply did not follow the format. Reply again \
with exactly one line `INTENT: <phrase>` followed by lines `- <point>`, nothing else.";

const EDGE_HEADER: &str = "Answer the prompt. Follow the structure of the sketch and fill in \
the specifics from the prompt.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SketchError {
    #[error("sketch is empty")]
    Empty,
    #[error("sketch must start with `INTENT: <phrase>`")]
    MissingIntent,
    #[error("line {line}: expected `- <point>`")]
    BadPoint { line: usize },
    #[error("sketch has no points")]
    NoPoints,
}

/// Structured abstract of an answer: an intent line and ordered points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sketch {
    pub intent: String,
    pub points: Vec<String>,
    pub raw: String,
    /// Set when the backend never produced a well-formed sketch and the raw
    /// output was wrapped instead.
    pub degraded: bool,
}

impl Sketch {
    pub fn parse(raw: &str) -> Result<Self, SketchError> {
        let mut lines = raw
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (_, first) = lines.next().ok_or(SketchError::Empty)?;
        let intent = first
            .strip_prefix("INTENT:")
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or(SketchError::MissingIntent)?;
        let mut points = Vec::new();
        for (line, text) in lines {
            let point = text
                .strip_prefix("- ")
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or(SketchError::BadPoint { line })?;
            points.push(point.to_string());
        }
        if points.is_empty() {
            return Err(SketchError::NoPoints);
        }
        Ok(Self {
            intent: intent.to_string(),
            points,
            raw: raw.to_string(),
            degraded: false,
        })
    }

    /// Single-line fallback wrapping unparseable output.
    pub fn degraded(raw: &str) -> Self {
        let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
        Self {
            intent: "unstructured".to_string(),
            points: if collapsed.is_empty() {
                Vec::new()
            } else {
                vec![collapsed]
            },
            raw: raw.to_string(),
            degraded: true,
        }
    }

    /// Canonical text form, as placed in edge contexts.
    pub fn render(&self) -> String {
        let mut out = format!("INTENT: {}", self.intent);
        for p in &self.points {
            out.push_str("\n- ");
            out.push_str(p);
        }
        out
    }
}

impl fmt::Display for Sketch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudDemo {
    pub perturbed_prompt: String,
    pub sketch: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeDemo {
    pub prompt: String,
    pub sketch: String,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("demo file: {0}")]
    Malformed(#[from] toml::de::Error),
    #[error("{domain}: demonstration {index} has an empty field")]
    EmptyField { domain: String, index: usize },
    #[error("{domain}: demonstration {index} sketch: {source}")]
    BadSketch {
        domain: String,
        index: usize,
        source: SketchError,
    },
    #[error("no demonstrations for domain `{0}`")]
    UnknownDomain(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSet {
    pub domain: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub cloud: Vec<CloudDemo>,
    #[serde(default)]
    pub edge: Vec<EdgeDemo>,
}

impl DemoSet {
    pub fn from_toml_str(doc: &str) -> Result<Self, DemoError> {
        let mut set: DemoSet = toml::from_str(doc)?;
        let domain = set.domain.clone();
        let check = |index: usize, fields: &[&str], sketch: &str| -> Result<(), DemoError> {
            if fields.iter().any(|f| f.trim().is_empty()) {
                return Err(DemoError::EmptyField {
                    domain: domain.clone(),
                    index,
                });
            }
            Sketch::parse(sketch)
                .map(drop)
                .map_err(|source| DemoError::BadSketch {
                    domain: domain.clone(),
                    index,
                    source,
                })
        };
        for (i, d) in set.cloud.iter_mut().enumerate() {
            d.sketch = d.sketch.trim().to_string();
            check(i, &[&d.perturbed_prompt, &d.sketch], &d.sketch)?;
        }
        for (i, d) in set.edge.iter_mut().enumerate() {
            d.sketch = d.sketch.trim().to_string();
            d.response = d.response.trim().to_string();
            check(i, &[&d.prompt, &d.sketch, &d.response], &d.sketch)?;
        }
        for k in &mut set.keywords {
            *k = k.to_lowercase();
        }
        Ok(set)
    }
}

const BUNDLED_DEMOS: [&str; 4] = [
    include_str!("../../data/demos/tourism.toml"),
    include_str!("../../data/demos/medical.toml"),
    include_str!("../../data/demos/banking.toml"),
    include_str!("../../data/demos/general.toml"),
];

/// Demonstration sets keyed by domain, with a keyword picker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoLibrary {
    sets: Vec<DemoSet>,
    fallback: String,
}

impl DemoLibrary {
    pub fn new(sets: Vec<DemoSet>, fallback: &str) -> Result<Self, DemoError> {
        if !sets.iter().any(|s| s.domain == fallback) {
            return Err(DemoError::UnknownDomain(fallback.to_string()));
        }
        Ok(Self {
            sets,
            fallback: fallback.to_string(),
        })
    }

    pub fn bundled() -> Self {
        let sets = BUNDLED_DEMOS
            .iter()
            .map(|doc| DemoSet::from_toml_str(doc).expect("bundled demos are valid"))
            .collect();
        Self::new(sets, "general").expect("bundled demos include the fallback")
    }

    pub fn sets(&self) -> &[DemoSet] {
        &self.sets
    }

    pub fn domain(&self, name: &str) -> Option<&DemoSet> {
        self.sets.iter().find(|s| s.domain == name)
    }

    /// Set whose keywords occur most often among the text's tokens; ties go
    /// to the earlier set and no hits fall back to the default domain.
    pub fn select(&self, text: &str) -> &DemoSet {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut best: Option<(&DemoSet, usize)> = None;
        for set in &self.sets {
            let hits = words.iter().filter(|w| set.keywords.contains(w)).count();
            if hits > 0 && best.is_none_or(|(_, b)| hits > b) {
                best = Some((set, hits));
            }
        }
        best.map(|(s, _)| s)
            .unwrap_or_else(|| self.domain(&self.fallback).expect("fallback present"))
    }
}

pub fn build_cloud_context(demos: &[CloudDemo], perturbed: &PerturbedPrompt) -> String {
    cloud_context_for(demos, &perturbed.text)
}

fn cloud_context_for(demos: &[CloudDemo], text: &str) -> String {
    let mut out = String::from(SKETCH_HEADER);
    for (i, d) in demos.iter().enumerate() {
        out.push_str(&format!(
            "\n\n### Example {}\nPrompt: {}\nSketch:\n{}",
            i + 1,
            d.perturbed_prompt,
            d.sketch
        ));
    }
    out.push_str(&format!("\n\n### Task\nPrompt: {text}\nSketch:\n"));
    out
}

pub fn build_edge_context(
    demos: &[EdgeDemo],
    original: &AnnotatedPrompt,
    sketch: &Sketch,
) -> String {
    let mut out = String::from(EDGE_HEADER);
    for (i, d) in demos.iter().enumerate() {
        out.push_str(&format!(
            "\n\n### Example {}\nPrompt: {}\nSketch:\n{}\nResponse:\n{}",
            i + 1,
            d.prompt,
            d.sketch,
            d.response
        ));
    }
    out.push_str(&format!(
        "\n\n### Task\nPrompt: {}\nSketch:\n{}\nResponse:\n",
        original.text,
        sketch.render()
    ));
    out
}

/// Where in a request a leak was caught.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultStage {
    CloudDispatch,
    Sketch,
}

impl fmt::Display for FaultStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultStage::CloudDispatch => "cloud_dispatch",
            FaultStage::Sketch => "sketch",
        })
    }
}

/// A flagged surface was about to cross to, or came back from, the cloud.
/// Carries the entity index and category only, never the surface.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("privacy fault at {stage}: flagged {category} entity #{entity_index}")]
pub struct PrivacyFault {
    pub stage: FaultStage,
    pub entity_index: usize,
    pub category: String,
}

/// Substring check of payloads against every flagged original surface.
#[derive(Debug, Clone)]
pub struct LeakGuard<'a> {
    prompt: &'a AnnotatedPrompt,
    mask: &'a [bool],
}

impl<'a> LeakGuard<'a> {
    pub fn new(prompt: &'a AnnotatedPrompt, profile: &'a RiskProfile) -> Self {
        Self {
            prompt,
            mask: &profile.mask,
        }
    }

    pub fn check(&self, payload: &str, stage: FaultStage) -> Result<(), PrivacyFault> {
        for (i, (entity, &flagged)) in self.prompt.entities.iter().zip(self.mask).enumerate() {
            if flagged && payload.contains(entity.surface.as_str()) {
                return Err(PrivacyFault {
                    stage,
                    entity_index: i,
                    category: entity.category.to_string(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Perturb,
    Cloud,
    Edge,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Perturb => "perturb",
            Stage::Cloud => "cloud",
            Stage::Edge => "edge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CollabError {
    #[error("{stage} stage: {source}")]
    Backend { stage: Stage, source: BackendError },
    #[error(transparent)]
    Privacy(#[from] PrivacyFault),
    #[error("perturbation: {0}")]
    Ldp(#[from] LdpError),
    #[error("backend `{name}` has role {found}, expected {expected}")]
    WrongRole {
        name: String,
        expected: BackendRole,
        found: BackendRole,
    },
}

fn require_role(backend: &Backend, expected: BackendRole) -> Result<(), CollabError> {
    if backend.role() != expected {
        return Err(CollabError::WrongRole {
            name: backend.name().to_string(),
            expected,
            found: backend.role(),
        });
    }
    Ok(())
}

/// Outcome of one backend stage: the result plus every completion spent on it.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput<T> {
    pub value: T,
    pub calls: u32,
    pub usage: Usage,
    pub latency: Duration,
}

fn call(
    backend: &Backend,
    stage: Stage,
    context: &str,
    deadline: Duration,
) -> Result<(Completion, u32), CollabError> {
    let (result, attempts) = backend.complete_with_retry(context, deadline);
    result
        .map(|c| (c, attempts))
        .map_err(|source| CollabError::Backend { stage, source })
}

/// Asks the cloud for a sketch, retrying once with a repair instruction when
/// the reply does not parse. `guard` vets every payload before it is sent.
pub fn generate_sketch(
    backend: &Backend,
    context: &str,
    deadline: Duration,
    guard: Option<&LeakGuard<'_>>,
) -> Result<StageOutput<Sketch>, CollabError> {
    require_role(backend, BackendRole::Cloud)?;
    if let Some(g) = guard {
        g.check(context, FaultStage::CloudDispatch)?;
    }
    let (first, mut calls) = call(backend, Stage::Cloud, context, deadline)?;
    let mut usage = first.usage;
    let mut latency = first.latency;
    let sketch = match Sketch::parse(&first.text) {
        Ok(s) => s,
        Err(_) => {
            let repair = format!("{context}{}\n\n{REPAIR_INSTRUCTION}\n", first.text);
            if let Some(g) = guard {
                g.check(&repair, FaultStage::CloudDispatch)?;
            }
            let (second, n) = call(backend, Stage::Cloud, &repair, deadline)?;
            calls += n;
            usage += second.usage;
            latency += second.latency;
            Sketch::parse(&second.text).unwrap_or_else(|_| Sketch::degraded(&second.text))
        }
    };
    Ok(StageOutput {
        value: sketch,
        calls,
        usage,
        latency,
    })
}

pub fn refine(
    backend: &Backend,
    context: &str,
    deadline: Duration,
) -> Result<StageOutput<String>, CollabError> {
    require_role(backend, BackendRole::Edge)?;
    let (completion, calls) = call(backend, Stage::Edge, context, deadline)?;
    if completion.text.trim().is_empty() {
        return Err(CollabError::Backend {
            stage: Stage::Edge,
            source: BackendError::EmptyCompletion {
                backend: backend.name().to_string(),
            },
        });
    }
    Ok(StageOutput {
        value: completion.text,
        calls,
        usage: completion.usage,
        latency: completion.latency,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    /// Measured wall clock.
    pub perturb: Duration,
    /// Backend-reported latencies, summed over retries.
    pub cloud: Duration,
    pub edge: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTokens {
    pub cloud: Usage,
    pub edge: Usage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollabExchange {
    pub perturbed: PerturbedPrompt,
    pub sketch: Sketch,
    pub response: String,
    pub timings: StageTimings,
    pub tokens: StageTokens,
    pub cloud_calls: u32,
    pub edge_calls: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollabOptions {
    pub k: usize,
    pub deadline: Duration,
}

impl Default for CollabOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            deadline: DEFAULT_DEADLINE,
        }
    }
}

/// Backends taking part in a collaborative request.
#[derive(Debug, Clone)]
pub struct Participants<'a> {
    pub cloud: &'a Backend,
    pub edge: &'a Backend,
    pub demos: &'a DemoLibrary,
}

/// Sketch from `cloud_text`, then refine against the original prompt. With a
/// guard, every cloud payload and the returned sketch are checked.
pub fn sketch_and_refine(
    parts: &Participants<'_>,
    original: &AnnotatedPrompt,
    cloud_text: &str,
    guard: Option<&LeakGuard<'_>>,
    options: &CollabOptions,
) -> Result<(StageOutput<Sketch>, StageOutput<String>), CollabError> {
    let demos = parts.demos.select(cloud_text);
    let k = options.k;
    let cloud_context = cloud_context_for(&demos.cloud[..k.min(demos.cloud.len())], cloud_text);
    let sketch = generate_sketch(parts.cloud, &cloud_context, options.deadline, guard)?;
    if let Some(g) = guard {
        g.check(&sketch.value.raw, FaultStage::Sketch)?;
    }
    let edge_context = build_edge_context(
        &demos.edge[..k.min(demos.edge.len())],
        original,
        &sketch.value,
    );
    let refined = refine(parts.edge, &edge_context, options.deadline)?;
    Ok((sketch, refined))
}

/// perturb, cloud sketch, edge refine. Any flagged surface found in a cloud
/// payload or in the returned sketch aborts the request.
#[allow(clippy::too_many_arguments)]
pub fn run_collaboration(
    parts: &Participants<'_>,
    prompt: &AnnotatedPrompt,
    profile: &RiskProfile,
    table: &CategoryTable,
    budget: &PrivacyBudget,
    seed: u64,
    options: &CollabOptions,
) -> Result<CollabExchange, CollabError> {
    require_role(parts.cloud, BackendRole::Cloud)?;
    require_role(parts.edge, BackendRole::Edge)?;
    let guard = LeakGuard::new(prompt, profile);

    let started = Instant::now();
    let perturbed = perturb_prompt(prompt, profile, table, budget, seed)?;
    let perturb_time = started.elapsed();

    let (sketch, refined) =
        sketch_and_refine(parts, prompt, &perturbed.text, Some(&guard), options)?;

    Ok(CollabExchange {
        perturbed,
        sketch: sketch.value,
        response: refined.value,
        timings: StageTimings {
            perturb: perturb_time.max(Duration::from_nanos(1)),
            cloud: sketch.latency,
            edge: refined.latency,
        },
        tokens: StageTokens {
            cloud: sketch.usage,
            edge: refined.usage,
        },
        cloud_calls: sketch.calls,
        edge_calls: refined.calls,
    })
}

/// Per-domain count of demos, for diagnostics.
pub fn demo_counts(lib: &DemoLibrary) -> BTreeMap<String, (usize, usize)> {
    lib.sets()
        .iter()
        .map(|s| (s.domain.clone(), (s.cloud.len(), s.edge.len())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::mock::{MockCloud, MockEdge, Recording, ScriptedBackend};
    use super::*;
    use crate::profiler::{detect_entities, profile, CueLexicon};
    use std::sync::Arc;

    fn perturbed(text: &str) -> PerturbedPrompt {
        PerturbedPrompt {
            text: text.into(),
            records: Vec::new(),
            seed: 0,
        }
    }

    #[test]
    fn sketch_grammar() {
        let s = Sketch::parse("INTENT: itinerary request\n- day one\n-  day two \n").unwrap();
        assert_eq!(s.intent, "itinerary request");
        assert_eq!(s.points, vec!["day one", "day two"]);
        assert!(!s.degraded);
        assert_eq!(Sketch::parse(&s.render()).unwrap().points, s.points);

        assert_eq!(Sketch::parse("  \n"), Err(SketchError::Empty));
        assert_eq!(
            Sketch::parse("Sure! Here is a plan."),
            Err(SketchError::MissingIntent)
        );
        assert_eq!(Sketch::parse("INTENT: x"), Err(SketchError::NoPoints));
        assert_eq!(
            Sketch::parse("INTENT: x\n- a\nprose"),
            Err(SketchError::BadPoint { line: 3 })
        );
        assert_eq!(
            Sketch::parse("INTENT:   \n- a"),
            Err(SketchError::MissingIntent)
        );

        let d = Sketch::degraded("Sure!\n  go  there");
        assert!(d.degraded);
        assert_eq!(d.points, vec!["Sure! go there"]);
    }

    #[test]
    fn bundled_demos_are_complete_and_entity_free_on_the_cloud_side() {
        let lib = DemoLibrary::bundled();
        let table = CategoryTable::default_table();
        let counts = demo_counts(&lib);
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| c == (4, 4)));
        for set in lib.sets() {
            for d in &set.cloud {
                let found = detect_entities(&d.perturbed_prompt, &table).entities;
                assert!(found.is_empty(), "{}: {:?}", set.domain, found);
                assert!(detect_entities(&d.sketch, &table).entities.is_empty());
            }
        }
    }

    #[test]
    fn demo_selection() {
        let lib = DemoLibrary::bundled();
        assert_eq!(
            lib.select("Plan a trip and a hotel in Lisbon").domain,
            "tourism"
        );
        assert_eq!(
            lib.select("my doctor changed the medication").domain,
            "medical"
        );
        assert_eq!(
            lib.select("transfer from my bank account").domain,
            "banking"
        );
        assert_eq!(lib.select("zzz").domain, "general");
    }

    #[test]
    fn demo_validation() {
        let bad = "domain = \"x\"\n[[cloud]]\nperturbed_prompt = \"p\"\nsketch = \"no intent\"\n";
        assert!(matches!(
            DemoSet::from_toml_str(bad),
            Err(DemoError::BadSketch { index: 0, .. })
        ));
        let empty = "domain = \"x\"\n[[edge]]\nprompt = \"p\"\nsketch = \"INTENT: a\\n- b\"\nresponse = \" \"\n";
        assert!(matches!(
            DemoSet::from_toml_str(empty),
            Err(DemoError::EmptyField { .. })
        ));
        assert!(DemoLibrary::new(Vec::new(), "general").is_err());
    }

    #[test]
    fn cloud_context_template() {
        let lib = DemoLibrary::bundled();
        let demos = &lib.domain("tourism").unwrap().cloud;
        let p = perturbed("Visit Lisbon soon");

        let zero = build_cloud_context(&[], &p);
        assert_eq!(
            zero,
            format!("{SKETCH_HEADER}\n\n### Task\nPrompt: Visit Lisbon soon\nSketch:\n")
        );

        let two = build_cloud_context(&demos[..2], &p);
        let a = two.find(&demos[0].sketch).unwrap();
        let b = two.find(&demos[1].sketch).unwrap();
        assert!(a < b);
        assert!(two.ends_with("Prompt: Visit Lisbon soon\nSketch:\n"));
        assert_eq!(two, build_cloud_context(&demos[..2], &p));
    }

    #[test]
    fn edge_context_template() {
        let lib = DemoLibrary::bundled();
        let table = CategoryTable::default_table();
        let prompt = detect_entities("I want to visit Tokyo", &table);
        let sketch = Sketch::parse("INTENT: itinerary request\n- a\n- b").unwrap();

        let zero = build_edge_context(&[], &prompt, &sketch);
        assert_eq!(
            zero,
            format!("{EDGE_HEADER}\n\n### Task\nPrompt: I want to visit Tokyo\nSketch:\n{}\nResponse:\n", sketch.raw)
        );
        let demos = &lib.domain("tourism").unwrap().edge;
        let two = build_edge_context(&demos[..2], &prompt, &sketch);
        assert!(two.contains("I want to visit Tokyo"));
        assert!(two.contains(&sketch.raw));
        assert!(two.contains(&demos[1].response));
    }

    #[test]
    fn leak_guard_checks_flagged_surfaces_only() {
        let table = CategoryTable::default_table();
        let lex = CueLexicon::default();
        let (p, r) = profile("I want to visit Tokyo", &table, &lex);
        let guard = LeakGuard::new(&p, &r);
        let fault = guard
            .check("about Tokyo", FaultStage::CloudDispatch)
            .unwrap_err();
        assert_eq!(fault.category, "LOCATION");
        assert!(!fault.to_string().contains("Tokyo"));
        assert!(guard
            .check("about Lisbon", FaultStage::CloudDispatch)
            .is_ok());

        let (p, r) = profile("Describe Tokyo in winter", &table, &lex);
        assert!(LeakGuard::new(&p, &r)
            .check("Tokyo", FaultStage::CloudDispatch)
            .is_ok());
    }

    fn mocks() -> (Backend, Backend) {
        (
            Backend::from_backend(MockCloud::new("cloud")),
            Backend::from_backend(MockEdge::new("edge", CategoryTable::default_table())),
        )
    }

    #[test]
    fn mock_sketch_is_deterministic_and_typed() {
        let (cloud, _) = mocks();
        let ctx = build_cloud_context(&[], &perturbed("I want to plan a trip to Lisbon"));
        let a = generate_sketch(&cloud, &ctx, DEFAULT_DEADLINE, None).unwrap();
        let b = generate_sketch(&cloud, &ctx, DEFAULT_DEADLINE, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.value.intent, "itinerary request");
        assert!(a.value.points.len() >= 2);
        assert_eq!(a.calls, 1);
    }

    #[test]
    fn free_prose_degrades_after_one_repair() {
        let prose = Backend::from_backend(ScriptedBackend::cloud("prose", |_| {
            Ok("Sure, happy to help!".into())
        }));
        let out = generate_sketch(&prose, "ctx", DEFAULT_DEADLINE, None).unwrap();
        assert!(out.value.degraded);
        assert_eq!(out.calls, 2);
        assert_eq!(out.value.points, vec!["Sure, happy to help!"]);
    }

    #[test]
    fn repair_succeeds_on_second_reply() {
        let flaky = Backend::from_backend(ScriptedBackend::cloud("flaky", |ctx| {
            Ok(if ctx.contains(REPAIR_INSTRUCTION) {
                "INTENT: x\n- y".into()
            } else {
                "nope".into()
            })
        }));
        let out = generate_sketch(&flaky, "ctx", DEFAULT_DEADLINE, None).unwrap();
        assert!(!out.value.degraded);
        assert_eq!(out.calls, 2);
    }

    #[test]
    fn roles_are_enforced() {
        let (cloud, edge) = mocks();
        assert!(matches!(
            generate_sketch(&edge, "c", DEFAULT_DEADLINE, None),
            Err(CollabError::WrongRole { .. })
        ));
        assert!(matches!(
            refine(&cloud, "c", DEFAULT_DEADLINE),
            Err(CollabError::WrongRole { .. })
        ));
    }

    #[test]
    fn refine_rejects_empty_output() {
        let empty = Backend::from_backend(ScriptedBackend::edge("blank", |_| Ok("  ".into())));
        match refine(&empty, "c", DEFAULT_DEADLINE) {
            Err(CollabError::Backend {
                stage: Stage::Edge,
                source,
            }) => {
                assert_eq!(source.to_string(), "blank: empty completion")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mock_refinement_fuses_sketch_and_entities() {
        let (_, edge) = mocks();
        let table = CategoryTable::default_table();
        let prompt = detect_entities("I want to visit Tokyo with Alice", &table);
        let sketch = Sketch::parse("INTENT: itinerary request\n- day one\n- day two").unwrap();
        let ctx = build_edge_context(&[], &prompt, &sketch);
        let out = refine(&edge, &ctx, DEFAULT_DEADLINE).unwrap();
        assert_eq!(
            out.value,
            "Itinerary request for Tokyo, Alice:\n1. day one (Tokyo)\n2. day two (Alice)"
        );
        assert!(out.latency > Duration::ZERO);
        assert_eq!(out, refine(&edge, &ctx, DEFAULT_DEADLINE).unwrap());
    }

    #[test]
    fn masked_travel_prompt_end_to_end() {
        let table = CategoryTable::default_table();
        let lex = CueLexicon::default();
        let (prompt, prof) = profile(
            "I want to plan a trip to Tokyo with Alice next week",
            &table,
            &lex,
        );
        let cloud_rec = Arc::new(Recording::new(MockCloud::new("cloud")));
        let cloud = Backend::new(cloud_rec.clone());
        let edge = Backend::from_backend(MockEdge::new("edge", table.clone()));
        let demos = DemoLibrary::bundled();
        let parts = Participants {
            cloud: &cloud,
            edge: &edge,
            demos: &demos,
        };
        let budget = PrivacyBudget::default();
        let ex = run_collaboration(
            &parts,
            &prompt,
            &prof,
            &table,
            &budget,
            7,
            &CollabOptions::default(),
        )
        .unwrap();

        assert_eq!(ex.perturbed.records.len(), 2);
        assert!(!ex.perturbed.text.contains("Tokyo") && !ex.perturbed.text.contains("Alice"));
        assert_eq!(ex.sketch.intent, "itinerary request");
        assert!(ex.response.contains("Tokyo") && ex.response.contains("Alice"));
        assert!(ex.timings.perturb > Duration::ZERO);
        assert!(ex.timings.cloud > Duration::ZERO && ex.timings.edge > Duration::ZERO);
        assert!(ex.tokens.cloud.prompt_tokens > 0 && ex.tokens.edge.completion_tokens > 0);
        assert_eq!((ex.cloud_calls, ex.edge_calls), (1, 1));

        let sent = cloud_rec.payloads();
        assert_eq!(sent.len(), 1);
        assert!(sent[0].contains(&ex.perturbed.text));
        assert!(!sent[0].contains("Tokyo") && !sent[0].contains("Alice"));

        let again = run_collaboration(
            &parts,
            &prompt,
            &prof,
            &table,
            &budget,
            7,
            &CollabOptions::default(),
        )
        .unwrap();
        assert_eq!(again.response, ex.response);
        assert_eq!(again.perturbed, ex.perturbed);
    }

    #[test]
    fn unflagged_prompt_goes_out_verbatim() {
        let table = CategoryTable::default_table();
        let (prompt, prof) = profile("Describe Tokyo in winter", &table, &CueLexicon::default());
        assert!(!prof.any_flagged());
        let cloud_rec = Arc::new(Recording::new(MockCloud::new("cloud")));
        let cloud = Backend::new(cloud_rec.clone());
        let (_, edge) = mocks();
        let demos = DemoLibrary::bundled();
        let parts = Participants {
            cloud: &cloud,
            edge: &edge,
            demos: &demos,
        };
        run_collaboration(
            &parts,
            &prompt,
            &prof,
            &table,
            &PrivacyBudget::default(),
            1,
            &CollabOptions::default(),
        )
        .unwrap();
        assert!(cloud_rec.payloads()[0].contains("Describe Tokyo in winter"));
    }

    #[test]
    fn injected_surface_in_sketch_is_a_privacy_fault() {
        let table = CategoryTable::default_table();
        let (prompt, prof) = profile("I want to visit Tokyo", &table, &CueLexicon::default());
        let hostile = Backend::from_backend(ScriptedBackend::cloud("inject", |_| {
            Ok("INTENT: itinerary request\n- go to Tokyo\n- eat".into())
        }));
        let edge_rec = Arc::new(Recording::new(MockEdge::new("edge", table.clone())));
        let edge = Backend::new(edge_rec.clone());
        let demos = DemoLibrary::bundled();
        let parts = Participants {
            cloud: &hostile,
            edge: &edge,
            demos: &demos,
        };
        let err = run_collaboration(
            &parts,
            &prompt,
            &prof,
            &table,
            &PrivacyBudget::default(),
            3,
            &CollabOptions::default(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            CollabError::Privacy(PrivacyFault {
                stage: FaultStage::Sketch,
                entity_index: 0,
                category: "LOCATION".into()
            })
        );
        assert!(edge_rec.payloads().is_empty());
    }

    #[test]
    fn cloud_timeout_is_retried_then_fails() {
        let table = CategoryTable::default_table();
        let (prompt, prof) = profile("I want to visit Tokyo", &table, &CueLexicon::default());
        let rec = Arc::new(Recording::new(ScriptedBackend::cloud("slow", |_| {
            Err(BackendError::Timeout {
                backend: "slow".into(),
                after: DEFAULT_DEADLINE,
            })
        })));
        let cloud = Backend::new(rec.clone());
        let (_, edge) = mocks();
        let demos = DemoLibrary::bundled();
        let parts = Participants {
            cloud: &cloud,
            edge: &edge,
            demos: &demos,
        };
        let err = run_collaboration(
            &parts,
            &prompt,
            &prof,
            &table,
            &PrivacyBudget::default(),
            3,
            &CollabOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            CollabError::Backend {
                stage: Stage::Cloud,
                source: BackendError::Timeout { .. }
            }
        ));
        assert_eq!(rec.payloads().len(), 2);
    }
}
