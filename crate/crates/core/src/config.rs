//! Privacy configuration document: category table, cue lexicon and default budget.

use crate::domain::{
    BudgetError, CategoryTable, ConfigDocument, PrivacyBudget, TableError, DEFAULT_CONFIG,
};
use crate::profiler::{CueLexicon, LexiconError};

pub const ENV_EPSILON_TOTAL: &str = "VEIL_EPSILON_TOTAL";
pub const ENV_ALPHA: &str = "VEIL_ALPHA";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("lexicon: {0}")]
    Lexicon(#[from] LexiconError),
    #[error("budget: {0}")]
    Budget(#[from] BudgetError),
    #[error("environment variable {name}: cannot parse {value:?} as a number")]
    Env { name: &'static str, value: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct PrivacyConfig {
    pub table: CategoryTable,
    pub lexicon: CueLexicon,
    pub budget: PrivacyBudget,
}

impl PrivacyConfig {
    pub fn from_toml_str(doc: &str) -> Result<Self, ConfigError> {
        let parsed = ConfigDocument::parse(doc)?;
        let lexicon = match parsed.lexicon {
            Some(l) => CueLexicon::new(l.first_person_pronouns)?,
            None => CueLexicon::default(),
        };
        let budget = match parsed.budget {
            Some(b) => PrivacyBudget::new(b.epsilon_total, b.alpha)?,
            None => PrivacyBudget::default(),
        };
        let table = CategoryTable::from_specs(parsed.category)?;
        Ok(Self {
            table,
            lexicon,
            budget,
        })
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let doc = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&doc)
    }

    pub fn bundled() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG).expect("bundled default configuration is valid")
    }

    /// Applies `VEIL_EPSILON_TOTAL` / `VEIL_ALPHA` overrides from the process environment.
    pub fn with_env_overrides(self) -> Result<Self, ConfigError> {
        self.with_overrides_from(|name| std::env::var(name).ok())
    }

    pub fn with_overrides_from(
        mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let read = |name: &'static str| -> Result<Option<f64>, ConfigError> {
            match lookup(name) {
                None => Ok(None),
                Some(value) => value
                    .trim()
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| ConfigError::Env { name, value }),
            }
        };
        let epsilon = read(ENV_EPSILON_TOTAL)?.unwrap_or(self.budget.epsilon_total());
        let alpha = read(ENV_ALPHA)?.unwrap_or(self.budget.alpha());
        self.budget = PrivacyBudget::new(epsilon, alpha)?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config() {
        let cfg = PrivacyConfig::bundled();
        assert_eq!(cfg.table.len(), 8);
        assert_eq!(cfg.budget, PrivacyBudget::new(1.0, 0.5).unwrap());
        assert!(cfg.lexicon.contains("I"));
    }

    #[test]
    fn env_overrides() {
        let cfg = PrivacyConfig::bundled()
            .with_overrides_from(|k| match k {
                ENV_EPSILON_TOTAL => Some("2.5".into()),
                _ => None,
            })
            .unwrap();
        assert_eq!(cfg.budget.epsilon_total(), 2.5);
        assert_eq!(cfg.budget.alpha(), 0.5);

        let err = PrivacyConfig::bundled()
            .with_overrides_from(|k| (k == ENV_ALPHA).then(|| "abc".to_string()))
            .unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Env {
                name: ENV_ALPHA,
                ..
            }
        ));

        let err = PrivacyConfig::bundled()
            .with_overrides_from(|k| (k == ENV_ALPHA).then(|| "0".to_string()))
            .unwrap_err();
        assert!(matches!(err, ConfigError::Budget(_)));
    }
}
