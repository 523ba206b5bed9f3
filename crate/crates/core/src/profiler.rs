//! Edge-side sensitivity profiling.
//!
//! Entities are found with the category table's regex and gazetteer rules.
//! The risk score is the sum of their weights. A prompt is in a private
//! context when it contains a first-person pronoun or a detected person, and
//! in that case every entity is flagged for protection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{tokenize, AnnotatedPrompt, CategoryId, CategoryTable, Entity, RiskProfile};

/// Private linguistic cues: first-person pronouns plus the category whose
/// detection alone signals a private context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueLexicon {
    first_person_pronouns: BTreeSet<String>,
    person_category: CategoryId,
}

#[derive(Debug, Error, PartialEq)]
pub enum LexiconError {
    #[error("cue lexicon must not be empty")]
    Empty,
    #[error("lexicon entry {0:?} is not a single token")]
    NotSingleToken(String),
}

impl CueLexicon {
    pub fn new<I, S>(pronouns: I) -> Result<Self, LexiconError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for p in pronouns {
            let p = p.as_ref();
            if tokenize(p).len() != 1 {
                return Err(LexiconError::NotSingleToken(p.to_string()));
            }
            set.insert(p.to_lowercase());
        }
        if set.is_empty() {
            return Err(LexiconError::Empty);
        }
        Ok(Self {
            first_person_pronouns: set,
            person_category: CategoryId::from("PERSON"),
        })
    }

    pub fn with_person_category(mut self, id: CategoryId) -> Self {
        self.person_category = id;
        self
    }

    pub fn contains(&self, token: &str) -> bool {
        self.first_person_pronouns.contains(&token.to_lowercase())
    }

    pub fn pronouns(&self) -> impl Iterator<Item = &str> {
        self.first_person_pronouns.iter().map(String::as_str)
    }

    pub fn person_category(&self) -> &CategoryId {
        &self.person_category
    }
}

impl Default for CueLexicon {
    fn default() -> Self {
        Self::new(["i", "me", "my", "mine", "we", "us", "our", "ours"]).expect("non-empty")
    }
}

/// Rule-based entity extraction. Overlaps resolve to the longest match, then
/// the earlier start, then the category listed first in the table.
pub fn detect_entities(text: &str, table: &CategoryTable) -> AnnotatedPrompt {
    struct Candidate {
        start: usize,
        end: usize,
        category: usize,
    }

    let mut candidates = Vec::new();
    for (ci, category) in table.categories().iter().enumerate() {
        for matcher in category.matchers() {
            for m in matcher.find_iter(text) {
                if m.start() < m.end() {
                    candidates.push(Candidate {
                        start: m.start(),
                        end: m.end(),
                        category: ci,
                    });
                }
            }
        }
    }
    candidates.sort_by(|a, b| {
        (b.end - b.start)
            .cmp(&(a.end - a.start))
            .then(a.start.cmp(&b.start))
            .then(a.category.cmp(&b.category))
    });

    let mut accepted: Vec<Candidate> = Vec::new();
    for c in candidates {
        if accepted
            .iter()
            .all(|a| c.end <= a.start || a.end <= c.start)
        {
            accepted.push(c);
        }
    }
    accepted.sort_by_key(|c| c.start);

    let entities = accepted
        .into_iter()
        .map(|c| {
            let category = &table.categories()[c.category];
            Entity {
                surface: text[c.start..c.end].to_string(),
                category: category.id().clone(),
                span: c.start..c.end,
                weight: category.weight(),
            }
        })
        .collect();

    AnnotatedPrompt {
        text: text.to_string(),
        entities,
        tokens: tokenize(text),
    }
}

/// R(P): sum of the weights of every extracted entity. Repeated surfaces at
/// distinct spans each count once.
pub fn risk_score(prompt: &AnnotatedPrompt) -> f64 {
    prompt.entities.iter().map(|e| e.weight).sum()
}

/// Δ: true when any token is a first-person pronoun or any entity is a person.
pub fn context_indicator(prompt: &AnnotatedPrompt, lexicon: &CueLexicon) -> bool {
    prompt.token_strs().any(|t| lexicon.contains(t))
        || prompt
            .entities
            .iter()
            .any(|e| &e.category == lexicon.person_category())
}

/// d: all entities flagged when Δ is set, none otherwise.
pub fn protection_mask(prompt: &AnnotatedPrompt, delta: bool) -> Vec<bool> {
    vec![delta; prompt.entities.len()]
}

pub fn profile(
    text: &str,
    table: &CategoryTable,
    lexicon: &CueLexicon,
) -> (AnnotatedPrompt, RiskProfile) {
    let prompt = detect_entities(text, table);
    let risk_score = risk_score(&prompt);
    let context_flag = context_indicator(&prompt, lexicon);
    let mask = protection_mask(&prompt, context_flag);
    (
        prompt,
        RiskProfile {
            risk_score,
            context_flag,
            mask,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> CategoryTable {
        CategoryTable::default_table()
    }

    fn surfaces(p: &AnnotatedPrompt) -> Vec<(&str, &str)> {
        p.entities
            .iter()
            .map(|e| (e.surface.as_str(), e.category.as_str()))
            .collect()
    }

    #[test]
    fn tokyo_prompts() {
        let t = table();
        let lex = CueLexicon::default();
        let a = detect_entities("I plan to travel solo to Tokyo for three days", &t);
        let b = detect_entities("Which country is Tokyo located in?", &t);
        assert_eq!(surfaces(&a), vec![("Tokyo", "LOCATION")]);
        assert_eq!(surfaces(&b), vec![("Tokyo", "LOCATION")]);
        assert_eq!(risk_score(&a), 0.35);
        assert!(context_indicator(&a, &lex));
        assert!(!context_indicator(&b, &lex));

        let (_, pa) = profile(&a.text, &t, &lex);
        let (_, pb) = profile(&b.text, &t, &lex);
        assert_eq!(pa.risk_score, pb.risk_score);
        assert_eq!(pa.mask, vec![true]);
        assert_eq!(pb.mask, vec![false]);
    }

    #[test]
    fn empty_prompt() {
        let (p, r) = profile("", &table(), &CueLexicon::default());
        assert!(p.entities.is_empty());
        assert_eq!(r.risk_score, 0.0);
        assert!(!r.context_flag);
        assert!(r.mask.is_empty());
    }

    #[test]
    fn no_entities_no_pronouns() {
        let (_, r) = profile(
            "Explain how photosynthesis works.",
            &table(),
            &CueLexicon::default(),
        );
        assert_eq!(
            r,
            RiskProfile {
                risk_score: 0.0,
                context_flag: false,
                mask: vec![]
            }
        );
    }

    #[test]
    fn person_and_diagnosis() {
        let p = detect_entities("Alice was diagnosed with HIV", &table());
        assert_eq!(
            surfaces(&p),
            vec![("Alice", "PERSON"), ("HIV", "DIAGNOSIS")]
        );
        assert!((risk_score(&p) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn person_entity_sets_context() {
        let p = detect_entities("Alice visited Paris", &table());
        assert!(context_indicator(&p, &CueLexicon::default()));
    }

    #[test]
    fn medical_example_flags_diagnosis() {
        let (p, r) = profile(
            "I tested positive for HIV last week and have been experiencing fever and diarrhea. \
             Should I be concerned about secondary infections?",
            &table(),
            &CueLexicon::default(),
        );
        assert!(r.context_flag);
        let i = p
            .entities
            .iter()
            .position(|e| e.category.as_str() == "DIAGNOSIS")
            .unwrap();
        assert_eq!(p.entities[i].surface, "HIV");
        assert!(r.mask[i]);
    }

    #[test]
    fn pronoun_matching_ignores_case() {
        let lex = CueLexicon::default();
        for text in ["i think so", "I think so", "MY plan", "I'm going"] {
            let p = detect_entities(text, &table());
            assert!(context_indicator(&p, &lex), "{text}");
        }
        let p = detect_entities("Iceland is cold", &table());
        assert!(!context_indicator(&p, &lex));
    }

    #[test]
    fn mask_follows_delta() {
        let p = detect_entities("Tokyo, Paris and London", &table());
        assert_eq!(protection_mask(&p, true), vec![true, true, true]);
        assert_eq!(protection_mask(&p, false), vec![false, false, false]);
        let empty = detect_entities("nothing here", &table());
        assert!(protection_mask(&empty, true).is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let p = detect_entities("She has type 2 diabetes and lives in New York", &table());
        assert_eq!(
            surfaces(&p),
            vec![("type 2 diabetes", "DIAGNOSIS"), ("New York", "LOCATION")]
        );
        let p = detect_entities("Card 4111 1111 1111 1111 and account 12345678", &table());
        assert_eq!(
            surfaces(&p),
            vec![
                ("4111 1111 1111 1111", "ACCOUNT_ID"),
                ("12345678", "ACCOUNT_ID")
            ]
        );
    }

    #[test]
    fn gazetteer_case_rules() {
        let p = detect_entities("tokyo is lowercase here", &table());
        assert!(p.entities.is_empty());
        let p = detect_entities("managing Asthma and hiv", &table());
        assert_eq!(
            surfaces(&p),
            vec![("Asthma", "DIAGNOSIS"), ("hiv", "DIAGNOSIS")]
        );
    }

    #[test]
    fn lexicon_validation() {
        assert_eq!(
            CueLexicon::new(Vec::<String>::new()),
            Err(LexiconError::Empty)
        );
        assert!(matches!(
            CueLexicon::new(["my self"]),
            Err(LexiconError::NotSingleToken(_))
        ));
    }

    const WORDS: &[&str] = &[
        "I",
        "my",
        "Tokyo",
        "Alice",
        "HIV",
        "on",
        "March 3",
        "$400",
        "Acme Bank",
        "French",
        "12345678",
        "the",
        "trip",
        "we",
        "and",
        ",",
        "doctor",
    ];

    fn text_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec(proptest::sample::select(WORDS), 0..12).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn spans_reconstruct_surfaces(text in text_strategy()) {
            let p = detect_entities(&text, &table());
            let mut last_end = 0;
            for e in &p.entities {
                prop_assert_eq!(&p.text[e.span.clone()], e.surface.as_str());
                prop_assert!(e.span.start >= last_end);
                last_end = e.span.end;
                prop_assert_eq!(Some(e.weight), table().weight(&e.category));
            }
        }

        #[test]
        fn appending_entities_never_lowers_risk(a in text_strategy(), b in text_strategy()) {
            let t = table();
            let base = risk_score(&detect_entities(&a, &t));
            let extended = risk_score(&detect_entities(&format!("{a} . {b}"), &t));
            prop_assert!(extended + 1e-12 >= base);
        }

        #[test]
        fn profile_is_deterministic_and_consistent(text in text_strategy()) {
            let t = table();
            let lex = CueLexicon::default();
            let (p1, r1) = profile(&text, &t, &lex);
            let (p2, r2) = profile(&text, &t, &lex);
            prop_assert_eq!(&p1, &p2);
            prop_assert_eq!(&r1, &r2);
            prop_assert_eq!(r1.mask.len(), p1.entities.len());
            prop_assert_eq!(r1.any_flagged(), r1.context_flag && !p1.entities.is_empty());
            let sum: f64 = p1.entities.iter().map(|e| e.weight).sum();
            prop_assert_eq!(r1.risk_score, sum);
            if let Some(last) = p1.entities.last() {
                let mut reduced = p1.clone();
                reduced.entities.pop();
                prop_assert!((risk_score(&p1) - risk_score(&reduced) - last.weight).abs() < 1e-12);
            }
        }
    }
}
