//! Synthetic four-domain prompt corpus: template generator and JSONL I/O.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::CategoryTable;
use crate::gating::{bootstrap_label, Mode, DEFAULT_THETA_HIGH};
use crate::profiler::{profile, CueLexicon};

pub const PER_DOMAIN: usize = 40;
pub const DEFAULT_SEED: u64 = 2024;

const BUNDLED: &str = include_str!("../data/corpus.jsonl");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Tourism,
    Medical,
    Banking,
    General,
}

impl Domain {
    pub const ALL: [Domain; 4] = [
        Domain::Tourism,
        Domain::Medical,
        Domain::Banking,
        Domain::General,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Tourism => "tourism",
            Domain::Medical => "medical",
            Domain::Banking => "banking",
            Domain::General => "general",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown domain `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub domain: Domain,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_mode: Option<Mode>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: empty {field}")]
    Empty { line: usize, field: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One record per non-blank line.
pub fn parse_jsonl(text: &str) -> Result<Vec<CorpusRecord>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(raw).map_err(|e| CorpusError::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.id.trim().is_empty() {
            return Err(CorpusError::Empty { line, field: "id" });
        }
        if record.prompt.trim().is_empty() {
            return Err(CorpusError::Empty {
                line,
                field: "prompt",
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line,
                id: record.id,
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load(path: &std::path::Path) -> Result<Vec<CorpusRecord>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl(&text)
}

pub fn to_jsonl(records: &[CorpusRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn bundled() -> Vec<CorpusRecord> {
    parse_jsonl(BUNDLED).expect("bundled corpus is valid")
}

const LOCATIONS: &[&str] = &[
    "Tokyo",
    "Kyoto",
    "Osaka",
    "Paris",
    "London",
    "Rome",
    "Barcelona",
    "New York",
    "Bangkok",
    "Berlin",
    "Sydney",
    "Seoul",
    "Vienna",
    "Prague",
    "Amsterdam",
    "Singapore",
];
const NATIONALITIES: &[&str] = &[
    "Japanese",
    "French",
    "American",
    "German",
    "Indian",
    "Brazilian",
    "Canadian",
    "Korean",
    "Italian",
    "Spanish",
];
const PERSONS: &[&str] = &[
    "Alice",
    "Bob",
    "Carol",
    "David Chen",
    "Emily Park",
    "Frank Miller",
    "Grace Lee",
    "Hannah Kim",
    "Ivan Petrov",
    "John Smith",
    "Kenji Tanaka",
    "Laura Brown",
    "Maria Garcia",
    "Priya Patel",
    "Wei Zhang",
    "Yuki Sato",
];
const DIAGNOSES: &[&str] = &[
    "HIV",
    "type 2 diabetes",
    "asthma",
    "hypertension",
    "depression",
    "epilepsy",
    "hepatitis B",
    "anxiety disorder",
    "tuberculosis",
];
const DATES: &[&str] = &[
    "March 3",
    "2025-06-14",
    "April 21",
    "12/09/2025",
    "October 5",
    "2024-11-02",
];
const MONEY: &[&str] = &[
    "$2,400",
    "$350",
    "1,200 euros",
    "5000 yen",
    "$78.50",
    "900 dollars",
];
const ACCOUNTS: &[&str] = &[
    "4417823019",
    "GB29NWBK60161331926819",
    "55018234",
    "DE89370400440532013000",
];
const CARDS: &[&str] = &[
    "4532 7788 1200 9914",
    "5105-1051-0510-5100",
    "4000 1234 5678 9010",
];
const TRAVEL_ORGS: &[&str] = &["Toyota", "Google", "Red Cross"];
const MEDICAL_ORGS: &[&str] = &["Mayo Clinic", "City General Hospital"];
const BANK_ORGS: &[&str] = &["Acme Bank", "First National Bank", "Harbor Credit Union"];
const GENERAL_ORGS: &[&str] = &["Google", "Microsoft", "Toyota", "United Nations"];

/// Templates per domain, grouped by the routing band they are written for.
struct Templates {
    cloud: &'static [&'static str],
    collab: &'static [&'static str],
    local: &'static [&'static str],
    orgs: &'static [&'static str],
}

const TOURISM: Templates = Templates {
    cloud: &[
        "What is the best season to visit {LOC}?",
        "Describe the food scene in {LOC} for a first trip.",
        "How does public transport work in {LOC}?",
        "Compare {LOC} and {LOC2} for a week of sightseeing.",
        "Which museums in {LOC} are worth a visit?",
        "Explain how travel insurance works for long flights.",
        "What should a {NAT} traveller know about tipping in {LOC}?",
    ],
    collab: &[
        "I want to visit {LOC} next spring.",
        "We are planning a trip to {LOC} with a {NAT} friend.",
        "Our tour of {LOC} starts at the station near {LOC2}.",
        "Can you suggest a day trip from {LOC} for me?",
        "I am a {NAT} student planning a holiday.",
    ],
    local: &[
        "I am travelling to {LOC} with {PERSON} on {DATE}.",
        "{PERSON} needs a visa to visit {LOC}.",
        "I paid {MONEY} with card {CARD} for a hotel in {LOC}.",
        "My travel insurance claim for {DIAG} treatment in {LOC} was denied.",
        "Book a tour of {LOC} for {PERSON} and {PERSON2}.",
    ],
    orgs: TRAVEL_ORGS,
};

const MEDICAL: Templates = Templates {
    cloud: &[
        "What are common symptoms of {DIAG}?",
        "How is {DIAG} usually treated?",
        "Explain what a blood panel measures.",
        "What does a first visit to {ORG} usually involve?",
        "How do doctors screen for {DIAG} in {LOC}?",
        "Explain the difference between {DIAG} and {DIAG2}.",
        "What vaccines are recommended before travelling to {LOC}?",
    ],
    collab: &[
        "I have a check-up at {ORG} next week.",
        "My clinic in {LOC} changed its opening hours.",
        "We moved to {LOC} and need a family doctor near {ORG}.",
        "Should I see a doctor about a cough that started on {DATE}?",
        "My {NAT} insurance does not cover {ORG}.",
    ],
    local: &[
        "I was diagnosed with {DIAG} last year. What should I ask my doctor?",
        "My test for {DIAG} at {ORG} came back positive.",
        "{PERSON} was treated for {DIAG} at {ORG}.",
        "I take medication for {DIAG} and {DIAG2}.",
        "{PERSON} has a hospital appointment on {DATE}.",
    ],
    orgs: MEDICAL_ORGS,
};

const BANKING: Templates = Templates {
    cloud: &[
        "What is the difference between a fixed and a variable mortgage?",
        "How long does an international transfer to {LOC} usually take?",
        "What fees does {ORG} charge for a savings account?",
        "Explain how credit scores are calculated.",
        "Is a {NAT} bank card accepted in {LOC}?",
        "How do banks detect card fraud?",
        "Compare savings rates at {ORG} and {ORG2}.",
    ],
    collab: &[
        "I want to open a savings account at {ORG}.",
        "My loan payment is due on {DATE}.",
        "We are moving to {LOC} and need a branch of {ORG}.",
        "Can I use my card in {LOC} without extra fees?",
        "Our mortgage renewal is on {DATE}; what should we prepare?",
    ],
    local: &[
        "I sent {MONEY} to account {ACC} and it has not arrived.",
        "My card {CARD} was charged twice for {MONEY}.",
        "{PERSON} needs to transfer {MONEY} from {ORG}.",
        "Please close my account {ACC} at {ORG}.",
        "My salary of {MONEY} was paid on {DATE} but the balance is wrong.",
    ],
    orgs: BANK_ORGS,
};

const GENERAL: Templates = Templates {
    cloud: &[
        "Explain how photosynthesis works.",
        "What is the history of {LOC}?",
        "Summarise the causes of the French Revolution.",
        "How do vaccines train the immune system?",
        "What was the first product made by {ORG}?",
        "Write a short poem about autumn.",
        "Why is the sky blue?",
    ],
    collab: &[
        "I am learning about {NAT} history.",
        "My favourite city is {LOC}.",
        "We want to cook a {NAT} dinner this weekend.",
        "Can you help me write a cover letter for {ORG}?",
        "I will start a new job in {LOC} at {ORG}.",
    ],
    local: &[
        "{PERSON} asked about the weather today.",
        "I met {PERSON} in {LOC} last week.",
        "Write a birthday message for {PERSON} on {DATE}.",
        "My friend {PERSON} just found out about {DIAG}.",
        "Remind me to pay {MONEY} to {PERSON}.",
    ],
    orgs: GENERAL_ORGS,
};

fn templates(domain: Domain) -> &'static Templates {
    match domain {
        Domain::Tourism => &TOURISM,
        Domain::Medical => &MEDICAL,
        Domain::Banking => &BANKING,
        Domain::General => &GENERAL,
    }
}

/// Records per band within each domain: cloud, collab, local.
const BANDS: [(Mode, usize); 3] = [(Mode::Cloud, 14), (Mode::Collab, 13), (Mode::Local, 13)];

/// Two distinct picks from a pool.
fn pick_two(pool: &[&'static str], rng: &mut ChaCha8Rng) -> (&'static str, &'static str) {
    let mut it = pool.choose_multiple(rng, 2);
    let a = *it.next().expect("pool has two entries");
    let b = *it.next().expect("pool has two entries");
    (a, b)
}

fn fill(template: &str, orgs: &[&'static str], rng: &mut ChaCha8Rng) -> String {
    let mut out = template.to_string();
    let slots: [(&str, &str, &[&'static str]); 8] = [
        ("{LOC}", "{LOC2}", LOCATIONS),
        ("{NAT}", "{NAT2}", NATIONALITIES),
        ("{PERSON}", "{PERSON2}", PERSONS),
        ("{DIAG}", "{DIAG2}", DIAGNOSES),
        ("{DATE}", "{DATE2}", DATES),
        ("{MONEY}", "{MONEY2}", MONEY),
        ("{ACC}", "{ACC2}", ACCOUNTS),
        ("{CARD}", "{CARD2}", CARDS),
    ];
    for (first, second, pool) in slots {
        let (a, b) = pick_two(pool, rng);
        out = out.replace(first, a).replace(second, b);
    }
    let (a, b) = pick_two(orgs, rng);
    out.replace("{ORG}", a).replace("{ORG2}", b)
}

/// Template-generated corpus, `PER_DOMAIN` records per domain, labelled by
/// the bootstrap rule.
pub fn generate(seed: u64, table: &CategoryTable, lexicon: &CueLexicon) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(PER_DOMAIN * Domain::ALL.len());
    for domain in Domain::ALL {
        let t = templates(domain);
        let mut n = 0;
        for (band, count) in BANDS {
            let pool = match band {
                Mode::Cloud => t.cloud,
                Mode::Collab => t.collab,
                Mode::Local => t.local,
            };
            for j in 0..count {
                n += 1;
                let prompt = fill(pool[j % pool.len()], t.orgs, &mut rng);
                let (_, risk) = profile(&prompt, table, lexicon);
                out.push(CorpusRecord {
                    id: format!("{domain}-{n:03}"),
                    domain,
                    prompt,
                    expected_mode: Some(bootstrap_label(&risk, DEFAULT_THETA_HIGH)),
                });
            }
        }
    }
    out
}
