//! Soft gating: a linear-softmax classifier over profiling features that
//! scores the three execution modes, trained with an entropy-regularized
//! routing loss and evaluated top-1 at inference.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AnnotatedPrompt, CategoryTable, RiskProfile};
use crate::profiler::{self, CueLexicon};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Execution modes in logit order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Cloud,
    Collab,
    Local,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Cloud, Mode::Collab, Mode::Local];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Mode> {
        Self::ALL.get(i).copied()
    }

    /// Higher keeps more of the prompt on the edge.
    pub fn protection_rank(self) -> u8 {
        match self {
            Mode::Cloud => 0,
            Mode::Collab => 1,
            Mode::Local => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cloud => "cloud",
            Mode::Collab => "collab",
            Mode::Local => "local",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cloud" => Ok(Mode::Cloud),
            "collab" => Ok(Mode::Collab),
            "local" => Ok(Mode::Local),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Fixed-width feature vector: `[R(P), 1{masked entity of category 0}, ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GatingFeatures(pub Vec<f64>);

impl GatingFeatures {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Builds the gating input. Category slots are set only for masked entities,
/// so an unflagged prompt contributes its risk score alone.
pub fn featurize(
    prompt: &AnnotatedPrompt,
    profile: &RiskProfile,
    table: &CategoryTable,
) -> GatingFeatures {
    let mut v = vec![0.0; 1 + table.len()];
    v[0] = profile.risk_score;
    for (entity, &flagged) in prompt.entities.iter().zip(&profile.mask) {
        if flagged {
            if let Some(j) = table.index_of(&entity.category) {
                v[1 + j] = 1.0;
            }
        }
    }
    GatingFeatures(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDistribution {
    /// Probabilities in `Mode::ALL` order.
    pub pi: [f64; 3],
    pub mode: Mode,
}

impl RoutingDistribution {
    pub fn prob(&self, mode: Mode) -> f64 {
        self.pi[mode.index()]
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatingError {
    #[error("feature dimension {found} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid model parameters: {0}")]
    InvalidModel(String),
    #[error("malformed model document: {0}")]
    Malformed(String),
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64; 3]) -> [f64; 3] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|l| (l - max).exp());
    let sum: f64 = exps.iter().sum();
    exps.map(|e| e / sum)
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(pi: &[f64]) -> f64 {
    -pi.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Top-1 selection; exact ties go to the most protective mode.
pub fn select_mode(pi: &[f64; 3]) -> Mode {
    let mut best = Mode::Local;
    for mode in [Mode::Collab, Mode::Cloud] {
        if pi[mode.index()] > pi[best.index()] {
            best = mode;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingModel {
    /// 3 rows (cloud, collab, local) by feature dimension.
    pub weights: Vec<Vec<f64>>,
    pub bias: [f64; 3],
    pub lambda: f64,
    /// Mean training loss after the last epoch, when trained.
    #[serde(default)]
    pub final_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    mode_order: [Mode; 3],
    #[serde(flatten)]
    model: GatingModel,
}

impl GatingModel {
    /// All-zero parameters: uniform routing everywhere.
    pub fn zeros(dim: usize, lambda: f64) -> Self {
        Self {
            weights: vec![vec![0.0; dim]; 3],
            bias: [0.0; 3],
            lambda,
            final_loss: None,
        }
    }

    /// Small uniform random initialization, deterministic in `seed`.
    pub fn init(dim: usize, lambda: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(dim, lambda);
        for row in &mut model.weights {
            for w in row.iter_mut() {
                *w = rng.random_range(-0.01..0.01);
            }
        }
        model
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), GatingError> {
        if self.weights.len() != 3 {
            return Err(GatingError::InvalidModel(format!(
                "expected 3 weight rows, found {}",
                self.weights.len()
            )));
        }
        let dim = self.dim();
        if self.weights.iter().any(|r| r.len() != dim) {
            return Err(GatingError::InvalidModel("ragged weight matrix".into()));
        }
        let finite = self
            .weights
            .iter()
            .flatten()
            .chain(&self.bias)
            .all(|x| x.is_finite());
        if !finite {
            return Err(GatingError::InvalidModel("non-finite parameter".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(GatingError::InvalidModel(format!(
                "lambda {} must be >= 0",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn logits(&self, features: &GatingFeatures) -> Result<[f64; 3], GatingError> {
        if features.dim() != self.dim() {
            return Err(GatingError::DimensionMismatch {
                expected: self.dim(),
                found: features.dim(),
            });
        }
        let mut out = self.bias;
        for (k, row) in self.weights.iter().enumerate() {
            out[k] += row
                .iter()
                .zip(features.as_slice())
                .map(|(w, z)| w * z)
                .sum::<f64>();
        }
        Ok(out)
    }

    pub fn forward(&self, features: &GatingFeatures) -> Result<RoutingDistribution, GatingError> {
        let pi = softmax(&self.logits(features)?);
        Ok(RoutingDistribution {
            mode: select_mode(&pi),
            pi,
        })
    }

    /// Serializes to a versioned JSON document. Floats use shortest
    /// round-trip formatting, so reloading is bit-exact.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            mode_order: Mode::ALL,
            model: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(doc: &str) -> Result<Self, GatingError> {
        let parsed: ModelDocument =
            serde_json::from_str(doc).map_err(|e| GatingError::Malformed(e.to_string()))?;
        if parsed.format_version != MODEL_FORMAT_VERSION {
            return Err(GatingError::Malformed(format!(
                "unsupported format_version {}",
                parsed.format_version
            )));
        }
        if parsed.mode_order != Mode::ALL {
            return Err(GatingError::Malformed("unexpected mode_order".into()));
        }
        parsed.model.validate()?;
        Ok(parsed.model)
    }
}

/// Gradient of the gating loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub bias: [f64; 3],
}

/// Mean over the dataset of `-ln π_y + λ·H(π)` and its gradient.
///
/// With `u` the logits, `∂(-ln π_y)/∂u_k = π_k - 1{k=y}` and
/// `∂H/∂u_k = -π_k (ln π_k + H)`.
pub fn loss_and_gradient(
    model: &GatingModel,
    dataset: &[(GatingFeatures, Mode)],
    lambda: f64,
) -> Result<(f64, Gradient), GatingError> {
    if dataset.is_empty() {
        return Err(GatingError::EmptyDataset);
    }
    let dim = model.dim();
    let mut grad = Gradient {
        weights: vec![vec![0.0; dim]; 3],
        bias: [0.0; 3],
    };
    let mut loss = 0.0;
    for (z, label) in dataset {
        let pi = softmax(&model.logits(z)?);
        let h = entropy(&pi);
        let y = label.index();
        loss += -pi[y].ln() + lambda * h;
        for (k, &pk) in pi.iter().enumerate() {
            let ce = pk - if k == y { 1.0 } else { 0.0 };
            let ent = if pk > 0.0 { -pk * (pk.ln() + h) } else { 0.0 };
            let g = ce + lambda * ent;
            grad.bias[k] += g;
            for (gw, x) in grad.weights[k].iter_mut().zip(z.as_slice()) {
                *gw += g * x;
            }
        }
    }
    let n = dataset.len() as f64;
    grad.bias.iter_mut().for_each(|g| *g /= n);
    grad.weights.iter_mut().flatten().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 2000,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent on the entropy-regularized routing loss.
pub fn train(
    dataset: &[(GatingFeatures, Mode)],
    lambda: f64,
    params: TrainParams,
) -> Result<GatingModel, GatingError> {
    let first = dataset.first().ok_or(GatingError::EmptyDataset)?;
    let mut model = GatingModel::init(first.0.dim(), lambda, params.seed);
    train_from(&mut model, dataset, params)?;
    Ok(model)
}

/// Continues gradient descent from the given parameters.
pub fn train_from(
    model: &mut GatingModel,
    dataset: &[(GatingFeatures, Mode)],
    params: TrainParams,
) -> Result<(), GatingError> {
    let lambda = model.lambda;
    let mut loss = f64::NAN;
    for epoch in 0..params.epochs {
        let (l, grad) = loss_and_gradient(model, dataset, lambda)?;
        if !l.is_finite() {
            return Err(GatingError::Diverged { epoch, loss: l });
        }
        loss = l;
        for (row, grow) in model.weights.iter_mut().zip(&grad.weights) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= params.learning_rate * g;
            }
        }
        for (b, g) in model.bias.iter_mut().zip(grad.bias) {
            *b -= params.learning_rate * g;
        }
    }
    if params.epochs > 0 {
        let (l, _) = loss_and_gradient(model, dataset, lambda)?;
        if !l.is_finite() {
            return Err(GatingError::Diverged {
                epoch: params.epochs,
                loss: l,
            });
        }
        loss = l;
    }
    model.final_loss = loss.is_finite().then_some(loss);
    Ok(())
}

pub fn accuracy(
    model: &GatingModel,
    dataset: &[(GatingFeatures, Mode)],
) -> Result<f64, GatingError> {
    if dataset.is_empty() {
        return Err(GatingError::EmptyDataset);
    }
    let mut hits = 0usize;
    for (z, label) in dataset {
        if model.forward(z)?.mode == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}

/// Routing threshold on R(P) separating collaborative from local execution.
pub const DEFAULT_THETA_HIGH: f64 = 0.8;

/// Label rule used to supervise the gate: nothing flagged goes to the cloud,
/// flagged prompts below `theta_high` collaborate, the rest stay local.
pub fn bootstrap_label(profile: &RiskProfile, theta_high: f64) -> Mode {
    if !profile.any_flagged() {
        Mode::Cloud
    } else if profile.risk_score < theta_high {
        Mode::Collab
    } else {
        Mode::Local
    }
}

/// Everything the router derived for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Routing {
    pub distribution: RoutingDistribution,
    pub profile: RiskProfile,
    pub prompt: AnnotatedPrompt,
    pub features: GatingFeatures,
}

pub fn route(
    model: &GatingModel,
    text: &str,
    table: &CategoryTable,
    lexicon: &CueLexicon,
) -> Result<Routing, GatingError> {
    let (prompt, profile) = profiler::profile(text, table, lexicon);
    let features = featurize(&prompt, &profile, table);
    let distribution = model.forward(&features)?;
    Ok(Routing {
        distribution,
        profile,
        prompt,
        features,
    })
}
