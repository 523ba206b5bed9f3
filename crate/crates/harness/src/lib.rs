//! Batch evaluation: the adaptive pipeline and four baselines over a corpus,
//! a grid of privacy budgets and a list of seeds.

pub mod baselines;
pub mod report;
pub mod run;

pub use report::RunReport;
pub use run::{BackendsConfig, Cell, Harness, HarnessError, HostileCloud, Method, PromptRecord};

use veil_core::bootstrap::default_model;
use veil_core::config::PrivacyConfig;
use veil_core::corpus::CorpusRecord;

/// Harness over the bundled config, the default gating model and `backends`.
pub fn default_harness(
    backends: BackendsConfig,
    corpus: &[CorpusRecord],
) -> Result<Harness, HarnessError> {
    let config = PrivacyConfig::bundled();
    let model = default_model(&config.table, &config.lexicon)
        .map_err(|e| HarnessError::Pipeline(e.into()))?;
    Ok(Harness::new(config, model, backends, corpus))
}

/// Runs the grid and assembles the report.
pub fn sweep(
    harness: &Harness,
    corpus: &[CorpusRecord],
    methods: &[Method],
    budgets: &[f64],
    seeds: &[u64],
) -> Result<RunReport, HarnessError> {
    Ok(RunReport::assemble(
        harness.sweep(corpus, methods, budgets, seeds)?,
    ))
}
