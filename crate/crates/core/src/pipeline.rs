//! Profile, gate, dispatch.

use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::collab::{
    run_collaboration, Backend, BackendError, BackendRole, CollabError, CollabOptions, DemoLibrary,
    FaultStage, LeakGuard, Participants, PrivacyFault, Sketch, Stage, StageTimings, StageTokens,
};
use crate::config::PrivacyConfig;
use crate::domain::PrivacyBudget;
use crate::gating::{route, GatingError, GatingModel, Mode, Routing};
use crate::ldp::{BudgetSplit, LdpError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("routing: {0}")]
    Routing(#[from] GatingError),
    #[error("{stage} stage: {source}")]
    Backend { stage: Stage, source: BackendError },
    #[error(transparent)]
    Privacy(#[from] PrivacyFault),
    #[error("perturbation: {0}")]
    Ldp(#[from] LdpError),
    #[error("setup: {0}")]
    Setup(String),
}

impl From<CollabError> for PipelineError {
    fn from(e: CollabError) -> Self {
        match e {
            CollabError::Backend { stage, source } => PipelineError::Backend { stage, source },
            CollabError::Privacy(f) => PipelineError::Privacy(f),
            CollabError::Ldp(e) => PipelineError::Ldp(e),
            e @ CollabError::WrongRole { .. } => PipelineError::Setup(e.to_string()),
        }
    }
}

/// Flip counts and budget splits only; never original or perturbed values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationAudit {
    pub entities_perturbed: usize,
    pub categories_flipped: usize,
    pub values_flipped: usize,
    pub splits: Vec<BudgetSplit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub response: String,
    pub routing: Routing,
    pub mode: Mode,
    pub cloud_calls: u32,
    pub edge_calls: u32,
    pub timings: StageTimings,
    pub tokens: StageTokens,
    pub audit: Option<PerturbationAudit>,
    pub sketch: Option<Sketch>,
}

impl Outcome {
    /// Sum of stage latencies.
    pub fn total_latency(&self) -> Duration {
        self.timings.perturb + self.timings.cloud + self.timings.edge
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PrivacyConfig,
    pub model: GatingModel,
    pub demos: DemoLibrary,
    pub cloud: Backend,
    pub edge: Backend,
    pub options: CollabOptions,
}

impl Pipeline {
    pub fn new(
        config: PrivacyConfig,
        model: GatingModel,
        demos: DemoLibrary,
        cloud: Backend,
        edge: Backend,
        options: CollabOptions,
    ) -> Result<Self, PipelineError> {
        if cloud.role() != BackendRole::Cloud || edge.role() != BackendRole::Edge {
            return Err(PipelineError::Setup(format!(
                "backend roles are cloud={}, edge={}",
                cloud.role(),
                edge.role()
            )));
        }
        model.validate()?;
        let want = 1 + config.table.len();
        if model.dim() != want {
            return Err(GatingError::DimensionMismatch {
                expected: want,
                found: model.dim(),
            }
            .into());
        }
        Ok(Self {
            config,
            model,
            demos,
            cloud,
            edge,
            options,
        })
    }

    pub fn route(&self, prompt: &str) -> Result<Routing, PipelineError> {
        Ok(route(
            &self.model,
            prompt,
            &self.config.table,
            &self.config.lexicon,
        )?)
    }

    pub fn infer(
        &self,
        prompt: &str,
        budget: Option<&PrivacyBudget>,
        seed: u64,
    ) -> Result<Outcome, PipelineError> {
        let routing = self.route(prompt)?;
        let mode = routing.distribution.mode;
        self.dispatch(routing, mode, budget, seed)
    }

    /// Runs the branch for `mode`. The cloud branch refuses prompts with
    /// flagged entities.
    pub fn dispatch(
        &self,
        routing: Routing,
        mode: Mode,
        budget: Option<&PrivacyBudget>,
        seed: u64,
    ) -> Result<Outcome, PipelineError> {
        let deadline = self.options.deadline;
        let mut out = Outcome {
            response: String::new(),
            routing,
            mode,
            cloud_calls: 0,
            edge_calls: 0,
            timings: StageTimings::default(),
            tokens: StageTokens::default(),
            audit: None,
            sketch: None,
        };
        match mode {
            Mode::Cloud => {
                LeakGuard::new(&out.routing.prompt, &out.routing.profile)
                    .check(&out.routing.prompt.text, FaultStage::CloudDispatch)?;
                let (result, calls) = self
                    .cloud
                    .complete_with_retry(&out.routing.prompt.text, deadline);
                out.cloud_calls = calls;
                let c = result.map_err(|source| PipelineError::Backend {
                    stage: Stage::Cloud,
                    source,
                })?;
                out.timings.cloud = c.latency;
                out.tokens.cloud = c.usage;
                out.response = c.text;
            }
            Mode::Local => {
                let (result, calls) = self
                    .edge
                    .complete_with_retry(&out.routing.prompt.text, deadline);
                out.edge_calls = calls;
                let c = result.map_err(|source| PipelineError::Backend {
                    stage: Stage::Edge,
                    source,
                })?;
                if c.text.trim().is_empty() {
                    return Err(PipelineError::Backend {
                        stage: Stage::Edge,
                        source: BackendError::EmptyCompletion {
                            backend: self.edge.name().to_string(),
                        },
                    });
                }
                out.timings.edge = c.latency;
                out.tokens.edge = c.usage;
                out.response = c.text;
            }
            Mode::Collab => {
                let parts = Participants {
                    cloud: &self.cloud,
                    edge: &self.edge,
                    demos: &self.demos,
                };
                let ex = run_collaboration(
                    &parts,
                    &out.routing.prompt,
                    &out.routing.profile,
                    &self.config.table,
                    budget.unwrap_or(&self.config.budget),
                    seed,
                    &self.options,
                )?;
                out.cloud_calls = ex.cloud_calls;
                out.edge_calls = ex.edge_calls;
                out.timings = ex.timings;
                out.tokens = ex.tokens;
                out.audit = Some(PerturbationAudit {
                    entities_perturbed: ex.perturbed.records.len(),
                    categories_flipped: ex.perturbed.categories_flipped(),
                    values_flipped: ex.perturbed.values_flipped(),
                    splits: ex.perturbed.records.iter().map(|r| r.split).collect(),
                });
                out.sketch = Some(ex.sketch);
                out.response = ex.response;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bootstrap::default_model;
    use crate::collab::mock::{MockCloud, MockEdge, Recording, Unreachable};
    use std::sync::{Arc, OnceLock};

    fn model() -> GatingModel {
        static MODEL: OnceLock<GatingModel> = OnceLock::new();
        MODEL
            .get_or_init(|| {
                let c = PrivacyConfig::bundled();
                default_model(&c.table, &c.lexicon).unwrap()
            })
            .clone()
    }

    struct Rig {
        pipeline: Pipeline,
        cloud: Arc<Recording<MockCloud>>,
        edge: Arc<Recording<MockEdge>>,
    }

    fn rig() -> Rig {
        let config = PrivacyConfig::bundled();
        let cloud = Arc::new(Recording::new(MockCloud::new("cloud")));
        let edge = Arc::new(Recording::new(MockEdge::new("edge", config.table.clone())));
        let pipeline = Pipeline::new(
            config,
            model(),
            DemoLibrary::bundled(),
            Backend::new(cloud.clone()),
            Backend::new(edge.clone()),
            CollabOptions::default(),
        )
        .unwrap();
        Rig {
            pipeline,
            cloud,
            edge,
        }
    }

    #[test]
    fn general_prompt_goes_to_cloud_once() {
        let r = rig();
        let out = r
            .pipeline
            .infer("Explain how rainbows form.", None, 1)
            .unwrap();
        assert_eq!(out.mode, Mode::Cloud);
        assert_eq!((out.cloud_calls, out.edge_calls), (1, 0));
        assert_eq!(
            r.cloud.payloads(),
            vec!["Explain how rainbows form.".to_string()]
        );
        assert_eq!(r.edge.calls(), 0);
        assert!(out.audit.is_none());
    }

    #[test]
    fn high_risk_prompt_stays_local() {
        let r = rig();
        let out = r
            .pipeline
            .infer("I was diagnosed with HIV and need advice.", None, 1)
            .unwrap();
        assert_eq!(out.mode, Mode::Local);
        assert_eq!((out.cloud_calls, out.edge_calls), (0, 1));
        assert_eq!(r.cloud.calls(), 0);
        assert!(out.response.contains("HIV"));
    }

    #[test]
    fn moderate_prompt_collaborates() {
        let r = rig();
        let out = r.pipeline.infer("I want to visit Tokyo", None, 5).unwrap();
        assert_eq!(out.mode, Mode::Collab);
        assert_eq!((out.cloud_calls, out.edge_calls), (1, 1));
        assert_eq!((r.cloud.calls(), r.edge.calls()), (1, 1));
        assert!(!r.cloud.payloads()[0].contains("Tokyo"));
        let audit = out.audit.unwrap();
        assert_eq!(audit.entities_perturbed, 1);
        assert!(out.response.contains("Tokyo"));
    }

    #[test]
    fn forced_cloud_dispatch_of_flagged_prompt_faults() {
        let r = rig();
        let routing = r.pipeline.route("I want to visit Tokyo").unwrap();
        let err = r
            .pipeline
            .dispatch(routing, Mode::Cloud, None, 0)
            .unwrap_err();
        assert!(matches!(
            err,
            PipelineError::Privacy(PrivacyFault {
                stage: FaultStage::CloudDispatch,
                ..
            })
        ));
        assert_eq!(r.cloud.calls(), 0);
    }

    #[test]
    fn unreachable_cloud_leaves_local_serving() {
        let config = PrivacyConfig::bundled();
        let edge = Backend::from_backend(MockEdge::new("edge", config.table.clone()));
        let cloud = Backend::from_backend(Unreachable::new("cloud", BackendRole::Cloud));
        let p = Pipeline::new(
            config,
            model(),
            DemoLibrary::bundled(),
            cloud,
            edge,
            CollabOptions::default(),
        )
        .unwrap();
        assert!(p.infer("I was diagnosed with HIV.", None, 0).is_ok());
        let err = p.infer("I want to visit Tokyo", None, 0).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::Backend {
                stage: Stage::Cloud,
                ..
            }
        ));
    }

    #[test]
    fn setup_validation() {
        let config = PrivacyConfig::bundled();
        let edge = Backend::from_backend(MockEdge::new("edge", config.table.clone()));
        let cloud = Backend::from_backend(MockCloud::new("cloud"));
        let swapped = Pipeline::new(
            config.clone(),
            model(),
            DemoLibrary::bundled(),
            edge.clone(),
            cloud.clone(),
            CollabOptions::default(),
        );
        assert!(matches!(swapped, Err(PipelineError::Setup(_))));
        let small = GatingModel::zeros(3, 0.0);
        let err = Pipeline::new(
            config,
            small,
            DemoLibrary::bundled(),
            cloud,
            edge,
            CollabOptions::default(),
        );
        assert!(matches!(
            err,
            Err(PipelineError::Routing(
                GatingError::DimensionMismatch { .. }
            ))
        ));
    }
}
