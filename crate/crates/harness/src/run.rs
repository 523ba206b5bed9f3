//! Executing one method over the corpus.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use veil_core::collab::mock::{self, Recording};
use veil_core::collab::{
    sketch_and_refine, Backend, BackendRole, BackendSpec, CollabOptions, DemoLibrary, Participants,
    Usage,
};
use veil_core::config::PrivacyConfig;
use veil_core::corpus::{CorpusRecord, Domain};
use veil_core::domain::{AnnotatedPrompt, PrivacyBudget, RiskProfile};
use veil_core::gating::{GatingModel, Mode};
use veil_core::ldp::derive_seed;
use veil_core::pipeline::{Pipeline, PipelineError};
use veil_core::profiler::profile;

use crate::baselines::{selective_value_rr, uniform_token_rr, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Adaptive,
    UniformLdp,
    SelectiveLdp,
    CloudOnly,
    EdgeOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Adaptive,
        Method::UniformLdp,
        Method::SelectiveLdp,
        Method::CloudOnly,
        Method::EdgeOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Adaptive => "adaptive",
            Method::UniformLdp => "uniform_ldp",
            Method::SelectiveLdp => "selective_ldp",
            Method::CloudOnly => "cloud_only",
            Method::EdgeOnly => "edge_only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// Replacement for the configured cloud backend, for adversarial runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostileCloud {
    /// Returns its input verbatim.
    Echo,
    /// Puts every gazetteer term into its output.
    Injecting,
    /// Returns text that never parses as a sketch.
    Garbage,
}

impl FromStr for HostileCloud {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "echo" => Ok(HostileCloud::Echo),
            "injecting" => Ok(HostileCloud::Injecting),
            "garbage" => Ok(HostileCloud::Garbage),
            _ => Err(format!("unknown hostile cloud `{s}`")),
        }
    }
}

/// Backend section of the harness config file.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default = "mock_spec")]
    pub cloud: BackendSpec,
    #[serde(default = "mock_spec")]
    pub edge: BackendSpec,
    #[serde(default)]
    pub hostile_cloud: Option<HostileCloud>,
}

fn mock_spec() -> BackendSpec {
    BackendSpec::Mock { name: None }
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            cloud: mock_spec(),
            edge: mock_spec(),
            hostile_cloud: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("backends config: {0}")]
    Config(#[from] toml::de::Error),
    #[error("budget: {0}")]
    Budget(String),
    #[error("empty grid: {0}")]
    EmptyGrid(&'static str),
    #[error("pipeline: {0}")]
    Pipeline(#[from] PipelineError),
}

impl BackendsConfig {
    pub fn from_toml_str(doc: &str) -> Result<Self, HarnessError> {
        Ok(toml::from_str(doc)?)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, HarnessError> {
        let doc = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&doc)
    }

    fn build(&self, config: &PrivacyConfig) -> (Backend, Backend) {
        let cloud = match self.hostile_cloud {
            None => self.cloud.build(BackendRole::Cloud, &config.table),
            Some(HostileCloud::Echo) => {
                Backend::from_backend(mock::echo("echo-cloud", BackendRole::Cloud))
            }
            Some(HostileCloud::Injecting) => {
                Backend::from_backend(mock::injecting_gazetteers("injecting-cloud", &config.table))
            }
            Some(HostileCloud::Garbage) => {
                Backend::from_backend(mock::garbage("garbage-cloud", BackendRole::Cloud))
            }
        };
        (cloud, self.edge.build(BackendRole::Edge, &config.table))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    BackendError,
    PrivacyFault,
    Error,
}

/// One prompt under one (method, budget, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptRecord {
    pub method: Method,
    pub epsilon_total: f64,
    pub seed: u64,
    pub id: String,
    pub domain: Domain,
    /// Routed mode; adaptive only.
    pub mode: Option<Mode>,
    pub expected_mode: Option<Mode>,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Calls that reached each backend, retries included.
    pub cloud_calls: usize,
    pub edge_calls: usize,
    pub cloud_tokens: Usage,
    pub edge_tokens: Usage,
    /// Simulated or measured backend latency, cloud plus edge.
    pub latency_ms: f64,
    pub flagged_entities: usize,
    /// Flagged original surfaces found in any cloud payload.
    pub leaked_surfaces: usize,
}

impl PromptRecord {
    pub fn total_tokens(&self) -> u64 {
        self.cloud_tokens.total() + self.edge_tokens.total()
    }
}

/// Flagged surfaces of `prompt` present in any of `payloads`.
pub fn leaked_surfaces(prompt: &AnnotatedPrompt, risk: &RiskProfile, payloads: &[String]) -> usize {
    prompt
        .entities
        .iter()
        .zip(&risk.mask)
        .filter(|(e, &flagged)| flagged && payloads.iter().any(|p| p.contains(e.surface.as_str())))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub method: Method,
    pub epsilon_total: f64,
    pub seed: u64,
}

/// Everything shared by the cells of a run.
pub struct Harness {
    pub config: PrivacyConfig,
    pub model: GatingModel,
    pub demos: DemoLibrary,
    pub options: CollabOptions,
    pub backends: BackendsConfig,
    pub vocab: Vocabulary,
}

struct Outcome {
    mode: Option<Mode>,
    latency: Duration,
    cloud_tokens: Usage,
    edge_tokens: Usage,
}

impl Harness {
    pub fn new(
        config: PrivacyConfig,
        model: GatingModel,
        backends: BackendsConfig,
        corpus: &[CorpusRecord],
    ) -> Self {
        let vocab = Vocabulary::for_corpus(corpus, &config.table);
        Self {
            config,
            model,
            demos: DemoLibrary::bundled(),
            options: CollabOptions::default(),
            backends,
            vocab,
        }
    }

    fn budget(&self, epsilon_total: f64) -> Result<PrivacyBudget, HarnessError> {
        PrivacyBudget::new(epsilon_total, self.config.budget.alpha())
            .map_err(|e| HarnessError::Budget(e.to_string()))
    }

    /// Runs every corpus prompt under `cell`. Per-prompt failures are recorded,
    /// not returned.
    pub fn run_cell(
        &self,
        corpus: &[CorpusRecord],
        cell: Cell,
    ) -> Result<Vec<PromptRecord>, HarnessError> {
        let budget = self.budget(cell.epsilon_total)?;
        let (cloud, edge) = self.backends.build(&self.config);
        let cloud_tap = Arc::new(Recording::new(cloud));
        let edge_tap = Arc::new(Recording::new(edge));
        let cloud = Backend::new(cloud_tap.clone());
        let edge = Backend::new(edge_tap.clone());
        let pipeline = Pipeline::new(
            self.config.clone(),
            self.model.clone(),
            self.demos.clone(),
            cloud.clone(),
            edge.clone(),
            self.options,
        )?;

        let mut out = Vec::with_capacity(corpus.len());
        for (i, record) in corpus.iter().enumerate() {
            let seed = derive_seed(cell.seed, i as u64);
            let (annotated, risk) =
                profile(&record.prompt, &self.config.table, &self.config.lexicon);
            let result = self.execute(cell.method, &pipeline, &annotated, &budget, seed);
            let payloads = cloud_tap.take();
            let edge_calls = edge_tap.take().len();

            let (status, error, outcome) = match result {
                Ok(o) => (Status::Ok, None, Some(o)),
                Err(e) => {
                    let status = match &e {
                        PipelineError::Backend { .. } => Status::BackendError,
                        PipelineError::Privacy(_) => Status::PrivacyFault,
                        _ => Status::Error,
                    };
                    (status, Some(e.to_string()), None)
                }
            };
            let mode = match (cell.method, &outcome) {
                (_, Some(o)) => o.mode,
                (Method::Adaptive, None) => Some(pipeline.route(&record.prompt)?.distribution.mode),
                _ => None,
            };
            out.push(PromptRecord {
                method: cell.method,
                epsilon_total: cell.epsilon_total,
                seed,
                id: record.id.clone(),
                domain: record.domain,
                mode,
                expected_mode: record.expected_mode,
                status,
                error,
                cloud_calls: payloads.len(),
                edge_calls,
                cloud_tokens: outcome
                    .as_ref()
                    .map_or_else(Usage::default, |o| o.cloud_tokens),
                edge_tokens: outcome
                    .as_ref()
                    .map_or_else(Usage::default, |o| o.edge_tokens),
                latency_ms: outcome
                    .as_ref()
                    .map_or(0.0, |o| o.latency.as_secs_f64() * 1e3),
                flagged_entities: risk.flagged_count(),
                leaked_surfaces: leaked_surfaces(&annotated, &risk, &payloads),
            });
        }
        Ok(out)
    }

    fn execute(
        &self,
        method: Method,
        pipeline: &Pipeline,
        prompt: &AnnotatedPrompt,
        budget: &PrivacyBudget,
        seed: u64,
    ) -> Result<Outcome, PipelineError> {
        let direct = |backend: &Backend, stage| {
            let (result, _) = backend.complete_with_retry(&prompt.text, self.options.deadline);
            result.map_err(|source| PipelineError::Backend { stage, source })
        };
        match method {
            Method::Adaptive => {
                let out = pipeline.infer(&prompt.text, Some(budget), seed)?;
                Ok(Outcome {
                    mode: Some(out.mode),
                    latency: out.timings.cloud + out.timings.edge,
                    cloud_tokens: out.tokens.cloud,
                    edge_tokens: out.tokens.edge,
                })
            }
            Method::CloudOnly => {
                let c = direct(&pipeline.cloud, veil_core::collab::Stage::Cloud)?;
                Ok(Outcome {
                    mode: None,
                    latency: c.latency,
                    cloud_tokens: c.usage,
                    edge_tokens: Usage::default(),
                })
            }
            Method::EdgeOnly => {
                let c = direct(&pipeline.edge, veil_core::collab::Stage::Edge)?;
                Ok(Outcome {
                    mode: None,
                    latency: c.latency,
                    cloud_tokens: Usage::default(),
                    edge_tokens: c.usage,
                })
            }
            Method::UniformLdp | Method::SelectiveLdp => {
                let eps = budget.epsilon_total();
                let cloud_text = if method == Method::UniformLdp {
                    uniform_token_rr(&prompt.text, &self.vocab, eps, seed)?
                } else {
                    selective_value_rr(prompt, &self.config.table, eps, seed)?
                };
                let parts = Participants {
                    cloud: &pipeline.cloud,
                    edge: &pipeline.edge,
                    demos: &self.demos,
                };
                let (sketch, refined) =
                    sketch_and_refine(&parts, prompt, &cloud_text, None, &self.options)
                        .map_err(PipelineError::from)?;
                Ok(Outcome {
                    mode: None,
                    latency: sketch.latency + refined.latency,
                    cloud_tokens: sketch.usage,
                    edge_tokens: refined.usage,
                })
            }
        }
    }

    /// Every cell of methods × budgets × seeds, in that nesting order. Cells
    /// run in parallel; results keep grid order.
    pub fn sweep(
        &self,
        corpus: &[CorpusRecord],
        methods: &[Method],
        budgets: &[f64],
        seeds: &[u64],
    ) -> Result<Vec<(Cell, Vec<PromptRecord>)>, HarnessError> {
        if methods.is_empty() {
            return Err(HarnessError::EmptyGrid("methods"));
        }
        if budgets.is_empty() {
            return Err(HarnessError::EmptyGrid("budgets"));
        }
        if seeds.is_empty() {
            return Err(HarnessError::EmptyGrid("seeds"));
        }
        for &b in budgets {
            self.budget(b)?;
        }
        let cells: Vec<Cell> = methods
            .iter()
            .flat_map(|&method| {
                budgets.iter().flat_map(move |&epsilon_total| {
                    seeds.iter().map(move |&seed| Cell {
                        method,
                        epsilon_total,
                        seed,
                    })
                })
            })
            .collect();
        cells
            .into_par_iter()
            .map(|cell| self.run_cell(corpus, cell).map(|records| (cell, records)))
            .collect()
    }
}
