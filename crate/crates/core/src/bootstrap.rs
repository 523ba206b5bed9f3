//! Gating model trained on the bundled corpus with bootstrap labels.

use crate::corpus::{self, CorpusRecord};
use crate::domain::CategoryTable;
use crate::gating::{
    self, bootstrap_label, featurize, GatingError, GatingFeatures, GatingModel, Mode, TrainParams,
};
use crate::profiler::{profile, CueLexicon};

pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Features paired with the bootstrap label computed from the profile, so
/// labels always agree with the table in use.
pub fn labelled_dataset(
    records: &[CorpusRecord],
    table: &CategoryTable,
    lexicon: &CueLexicon,
    theta_high: f64,
) -> Vec<(GatingFeatures, Mode)> {
    records
        .iter()
        .map(|r| {
            let (prompt, risk) = profile(&r.prompt, table, lexicon);
            (
                featurize(&prompt, &risk, table),
                bootstrap_label(&risk, theta_high),
            )
        })
        .collect()
}

pub fn train_on(
    records: &[CorpusRecord],
    table: &CategoryTable,
    lexicon: &CueLexicon,
    lambda: f64,
    params: TrainParams,
) -> Result<GatingModel, GatingError> {
    let data = labelled_dataset(records, table, lexicon, gating::DEFAULT_THETA_HIGH);
    gating::train(&data, lambda, params)
}

/// Default router: bundled corpus, default table, `DEFAULT_LAMBDA`.
pub fn default_model(
    table: &CategoryTable,
    lexicon: &CueLexicon,
) -> Result<GatingModel, GatingError> {
    train_on(
        &corpus::bundled(),
        table,
        lexicon,
        DEFAULT_LAMBDA,
        TrainParams::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::{accuracy, route};

    #[test]
    fn fits_the_corpus() {
        let table = CategoryTable::default_table();
        let lex = CueLexicon::default();
        let data = labelled_dataset(&corpus::bundled(), &table, &lex, gating::DEFAULT_THETA_HIGH);
        for lambda in [0.0, DEFAULT_LAMBDA] {
            let model = gating::train(&data, lambda, TrainParams::default()).unwrap();
            let acc = accuracy(&model, &data).unwrap();
            assert!(acc >= 0.95, "lambda {lambda}: {acc}");
        }
    }

    #[test]
    fn routes_reference_prompts() {
        let table = CategoryTable::default_table();
        let lex = CueLexicon::default();
        let model = default_model(&table, &lex).unwrap();
        let mode = |t: &str| route(&model, t, &table, &lex).unwrap().distribution.mode;
        assert_eq!(mode("Explain how rainbows form."), Mode::Cloud);
        assert_eq!(
            mode("I was diagnosed with HIV and need advice."),
            Mode::Local
        );
        assert_eq!(mode("I want to visit Tokyo"), Mode::Collab);
        assert_eq!(mode("What is the best season to visit Tokyo?"), Mode::Cloud);
    }
}
