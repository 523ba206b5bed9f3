//! Shared vocabulary: categories, entities, annotated prompts and budgets.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::sync::OnceLock;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current version of the configuration document format.
pub const CONFIG_VERSION: u32 = 1;

/// Symbolic category label such as `PERSON` or `LOCATION`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(String);

impl CategoryId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CategoryId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Detection rule for a category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PatternSpec {
    Regex { regex: String },
    Gazetteer { gazetteer: Vec<String> },
}

/// One category as written in the configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: CategoryId,
    pub weight: f64,
    #[serde(default = "default_case_sensitive")]
    pub case_sensitive: bool,
    pub value_domain: Vec<String>,
    pub patterns: Vec<PatternSpec>,
}

fn default_case_sensitive() -> bool {
    true
}

#[derive(Debug, Error, PartialEq)]
pub enum TableError {
    #[error("malformed configuration document: {0}")]
    Malformed(String),
    #[error("unsupported configuration version {found} (expected {CONFIG_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("category {category}: field weight: {weight} is outside [0, 1]")]
    WeightOutOfRange { category: CategoryId, weight: f64 },
    #[error("category {category}: field value_domain: degenerate value domain (size {size}, need at least 2)")]
    DegenerateValueDomain { category: CategoryId, size: usize },
    #[error("category {category}: field value_domain: duplicate value {value:?}")]
    DuplicateValue { category: CategoryId, value: String },
    #[error("category {category}: duplicate category id")]
    DuplicateCategory { category: CategoryId },
    #[error("category {category}: field patterns: invalid pattern: {reason}")]
    InvalidPattern {
        category: CategoryId,
        reason: String,
    },
    #[error("category {category}: field patterns: no detection rules")]
    NoPatterns { category: CategoryId },
    #[error("category table needs at least 2 categories, found {0}")]
    TooFewCategories(usize),
    #[error("category {category}: field value_domain: surrogate {value:?} is itself detectable as {detected_as}")]
    DetectableSurrogate {
        category: CategoryId,
        value: String,
        detected_as: CategoryId,
    },
}

/// A validated category with compiled detection rules.
#[derive(Debug, Clone)]
pub struct Category {
    spec: CategorySpec,
    matchers: Vec<Regex>,
}

impl Category {
    pub fn id(&self) -> &CategoryId {
        &self.spec.id
    }

    pub fn weight(&self) -> f64 {
        self.spec.weight
    }

    pub fn value_domain(&self) -> &[String] {
        &self.spec.value_domain
    }

    pub fn spec(&self) -> &CategorySpec {
        &self.spec
    }

    pub(crate) fn matchers(&self) -> &[Regex] {
        &self.matchers
    }

    fn compile(spec: CategorySpec) -> Result<Self, TableError> {
        let id = spec.id.clone();
        if !(0.0..=1.0).contains(&spec.weight) || !spec.weight.is_finite() {
            return Err(TableError::WeightOutOfRange {
                category: id,
                weight: spec.weight,
            });
        }
        if spec.value_domain.len() < 2 {
            return Err(TableError::DegenerateValueDomain {
                category: id,
                size: spec.value_domain.len(),
            });
        }
        let mut seen = HashSet::new();
        for value in &spec.value_domain {
            if value.trim().is_empty() || !seen.insert(value.as_str()) {
                return Err(TableError::DuplicateValue {
                    category: id,
                    value: value.clone(),
                });
            }
        }
        if spec.patterns.is_empty() {
            return Err(TableError::NoPatterns { category: id });
        }

        let mut matchers = Vec::with_capacity(spec.patterns.len());
        for pattern in &spec.patterns {
            let (source, case_insensitive) = match pattern {
                PatternSpec::Regex { regex } => (regex.clone(), false),
                PatternSpec::Gazetteer { gazetteer } => {
                    if gazetteer.is_empty() || gazetteer.iter().any(|t| t.trim().is_empty()) {
                        return Err(TableError::InvalidPattern {
                            category: id,
                            reason: "empty gazetteer or gazetteer term".into(),
                        });
                    }
                    let mut terms: Vec<&str> = gazetteer.iter().map(String::as_str).collect();
                    // Longer terms first so alternation prefers "New York City" over "New York".
                    terms.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
                    let alternation = terms
                        .iter()
                        .map(|t| regex::escape(t))
                        .collect::<Vec<_>>()
                        .join("|");
                    (format!(r"\b(?:{alternation})\b"), !spec.case_sensitive)
                }
            };
            let compiled = RegexBuilder::new(&source)
                .case_insensitive(case_insensitive)
                .build()
                .map_err(|e| TableError::InvalidPattern {
                    category: id.clone(),
                    reason: e.to_string(),
                })?;
            matchers.push(compiled);
        }
        Ok(Self { spec, matchers })
    }
}

/// Immutable category table: weights, surrogate value domains and detection rules.
#[derive(Debug, Clone)]
pub struct CategoryTable {
    categories: Vec<Category>,
}

impl PartialEq for CategoryTable {
    fn eq(&self, other: &Self) -> bool {
        self.specs().eq(other.specs())
    }
}

impl CategoryTable {
    /// Builds a table from category specs, validating every invariant.
    pub fn from_specs(specs: Vec<CategorySpec>) -> Result<Self, TableError> {
        let mut ids = HashSet::new();
        let mut categories = Vec::with_capacity(specs.len());
        for spec in specs {
            if !ids.insert(spec.id.clone()) {
                return Err(TableError::DuplicateCategory { category: spec.id });
            }
            categories.push(Category::compile(spec)?);
        }
        if categories.len() < 2 {
            return Err(TableError::TooFewCategories(categories.len()));
        }
        let table = Self { categories };
        table.check_surrogates()?;
        Ok(table)
    }

    /// Surrogates must never be detectable entities themselves, otherwise a
    /// perturbed prompt could reintroduce a real surface.
    fn check_surrogates(&self) -> Result<(), TableError> {
        for category in &self.categories {
            for value in category.value_domain() {
                for other in &self.categories {
                    if other.matchers.iter().any(|m| m.is_match(value)) {
                        return Err(TableError::DetectableSurrogate {
                            category: category.id().clone(),
                            value: value.clone(),
                            detected_as: other.id().clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses the `[[category]]` entries of a configuration document.
    pub fn from_toml_str(doc: &str) -> Result<Self, TableError> {
        let parsed = ConfigDocument::parse(doc)?;
        Self::from_specs(parsed.category)
    }

    /// The bundled English default table.
    pub fn default_table() -> Self {
        static DEFAULT: OnceLock<CategoryTable> = OnceLock::new();
        DEFAULT
            .get_or_init(|| {
                Self::from_toml_str(DEFAULT_CONFIG).expect("bundled default configuration is valid")
            })
            .clone()
    }

    /// Serializes the table as a configuration document with default budget and lexicon sections omitted.
    pub fn to_toml_string(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            version: u32,
            category: Vec<&'a CategorySpec>,
        }
        toml::to_string(&Doc {
            version: CONFIG_VERSION,
            category: self.specs().collect(),
        })
        .expect("category specs serialize")
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn specs(&self) -> impl Iterator<Item = &CategorySpec> {
        self.categories.iter().map(|c| &c.spec)
    }

    /// K₁, the number of categories.
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn index_of(&self, id: &CategoryId) -> Option<usize> {
        self.categories.iter().position(|c| c.id() == id)
    }

    pub fn get(&self, id: &CategoryId) -> Option<&Category> {
        self.categories.iter().find(|c| c.id() == id)
    }

    pub fn weight(&self, id: &CategoryId) -> Option<f64> {
        self.get(id).map(Category::weight)
    }

    /// A table with only the named categories, in the given order.
    pub fn restricted_to(&self, ids: &[&str]) -> Result<Self, TableError> {
        let specs = ids
            .iter()
            .map(|id| {
                self.get(&CategoryId::from(*id))
                    .map(|c| c.spec.clone())
                    .ok_or_else(|| TableError::Malformed(format!("unknown category {id}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_specs(specs)
    }
}

pub(crate) const DEFAULT_CONFIG: &str = include_str!("../data/default_config.toml");

/// Raw shape of the configuration document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ConfigDocument {
    pub version: u32,
    #[serde(default)]
    pub budget: Option<BudgetSection>,
    #[serde(default)]
    pub lexicon: Option<LexiconSection>,
    #[serde(default)]
    pub category: Vec<CategorySpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct BudgetSection {
    pub epsilon_total: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct LexiconSection {
    pub first_person_pronouns: Vec<String>,
}

impl ConfigDocument {
    pub(crate) fn parse(doc: &str) -> Result<Self, TableError> {
        let parsed: ConfigDocument =
            toml::from_str(doc).map_err(|e| TableError::Malformed(e.to_string()))?;
        if parsed.version != CONFIG_VERSION {
            return Err(TableError::UnsupportedVersion {
                found: parsed.version,
            });
        }
        Ok(parsed)
    }
}

/// Half-open byte range into the prompt text.
pub type Span = Range<usize>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub surface: String,
    pub category: CategoryId,
    pub span: Span,
    pub weight: f64,
}

/// The raw prompt with detected entities and token spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPrompt {
    pub text: String,
    pub entities: Vec<Entity>,
    pub tokens: Vec<Span>,
}

impl AnnotatedPrompt {
    pub fn token_str(&self, i: usize) -> &str {
        &self.text[self.tokens[i].clone()]
    }

    pub fn token_strs(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|s| &self.text[s.clone()])
    }
}

/// Splits on whitespace and punctuation: maximal runs of alphanumeric
/// characters form word tokens, every other non-whitespace character is a
/// token of its own.
pub fn tokenize(text: &str) -> Vec<Span> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(start) = word_start.take() {
            tokens.push(start..i);
        }
        if !ch.is_whitespace() {
            tokens.push(i..i + ch.len_utf8());
        }
    }
    if let Some(start) = word_start {
        tokens.push(start..text.len());
    }
    tokens
}

/// Number of tokens in `text`, used for usage accounting.
pub fn token_count(text: &str) -> usize {
    tokenize(text).len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    /// R(P): sum of detected entity weights.
    pub risk_score: f64,
    /// Δ: private-context indicator.
    pub context_flag: bool,
    /// d: one protection bit per entity.
    pub mask: Vec<bool>,
}

impl RiskProfile {
    pub fn flagged_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn any_flagged(&self) -> bool {
        self.mask.iter().any(|&b| b)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BudgetError {
    #[error("epsilon_total must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("alpha must lie in (0, 1], got {0}")]
    Alpha(f64),
}

/// Total privacy budget and the allocation hyperparameter α.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBudget")]
pub struct PrivacyBudget {
    epsilon_total: f64,
    alpha: f64,
}

#[derive(Deserialize)]
struct RawBudget {
    epsilon_total: f64,
    alpha: f64,
}

impl TryFrom<RawBudget> for PrivacyBudget {
    type Error = BudgetError;

    fn try_from(raw: RawBudget) -> Result<Self, Self::Error> {
        Self::new(raw.epsilon_total, raw.alpha)
    }
}

impl PrivacyBudget {
    pub fn new(epsilon_total: f64, alpha: f64) -> Result<Self, BudgetError> {
        if !(epsilon_total.is_finite() && epsilon_total > 0.0) {
            return Err(BudgetError::Epsilon(epsilon_total));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(BudgetError::Alpha(alpha));
        }
        Ok(Self {
            epsilon_total,
            alpha,
        })
    }

    /// Zero budget: every randomized-response layer becomes uniform. Only
    /// meaningful for mechanism analysis, so it bypasses `new`'s positivity check.
    pub fn zero(alpha: f64) -> Self {
        Self {
            epsilon_total: 0.0,
            alpha,
        }
    }

    pub fn epsilon_total(&self) -> f64 {
        self.epsilon_total
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for PrivacyBudget {
    fn default() -> Self {
        Self {
            epsilon_total: 1.0,
            alpha: 0.5,
        }
    }
}
