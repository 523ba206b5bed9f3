//! Prompt transforms used by the LDP baselines.

use std::collections::BTreeSet;

use veil_core::corpus::CorpusRecord;
use veil_core::domain::{tokenize, AnnotatedPrompt, CategoryTable};
use veil_core::ldp::{entity_stream, rr_draw, rr_probability, stable_hash, value_slot, LdpError};

/// Closed token vocabulary for token-level randomized response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Sorted, deduplicated tokens of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for text in texts {
            for span in tokenize(text) {
                set.insert(text[span].to_string());
            }
        }
        Self {
            tokens: set.into_iter().collect(),
        }
    }

    /// Corpus tokens plus the tokens of every surrogate pool.
    pub fn for_corpus(records: &[CorpusRecord], table: &CategoryTable) -> Self {
        let pools = table
            .categories()
            .iter()
            .flat_map(|c| c.value_domain().iter().map(String::as_str));
        Self::from_texts(records.iter().map(|r| r.prompt.as_str()).chain(pools))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Index of `token`, or a stable hash slot for out-of-vocabulary tokens.
    pub fn slot(&self, token: &str) -> usize {
        self.tokens
            .binary_search_by(|t| t.as_str().cmp(token))
            .unwrap_or_else(|_| (stable_hash(token.as_bytes()) % self.tokens.len() as u64) as usize)
    }
}

/// Every token replaced by a |V|-ary RR draw at `epsilon_total / n`.
pub fn uniform_token_rr(
    text: &str,
    vocab: &Vocabulary,
    epsilon_total: f64,
    seed: u64,
) -> Result<String, LdpError> {
    let spans = tokenize(text);
    if spans.is_empty() {
        return Ok(text.to_string());
    }
    let k = vocab.len();
    let p = rr_probability(epsilon_total / spans.len() as f64, k)?;
    let drawn: Vec<&str> = spans
        .iter()
        .enumerate()
        .map(|(i, span)| {
            let mut rng = entity_stream(seed, i);
            vocab.tokens[rr_draw(&mut rng, vocab.slot(&text[span.clone()]), k, p)].as_str()
        })
        .collect();
    let mut out = text.to_string();
    for (span, token) in spans.iter().zip(drawn).rev() {
        out.replace_range(span.clone(), token);
    }
    Ok(out)
}

/// Every detected entity's value replaced by a single-layer RR draw over
/// its own category's pool at the full budget. No category layer.
pub fn selective_value_rr(
    prompt: &AnnotatedPrompt,
    table: &CategoryTable,
    epsilon_total: f64,
    seed: u64,
) -> Result<String, LdpError> {
    let mut out = prompt.text.clone();
    for (i, entity) in prompt.entities.iter().enumerate().rev() {
        let pool = table
            .get(&entity.category)
            .ok_or_else(|| LdpError::UnknownCategory(entity.category.clone()))?
            .value_domain();
        let p = rr_probability(epsilon_total, pool.len())?;
        let truth = value_slot(table, &entity.category, &entity.surface)?;
        let mut rng = entity_stream(seed, i);
        let slot = rr_draw(&mut rng, truth, pool.len(), p);
        let value = if slot == truth {
            entity.surface.as_str()
        } else {
            pool[slot].as_str()
        };
        out.replace_range(entity.span.clone(), value);
    }
    Ok(out)
}
