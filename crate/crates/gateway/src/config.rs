use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;
pub use veil_core::collab::BackendSpec;
use veil_core::collab::{CollabOptions, DEFAULT_K};

pub const DEFAULT_MAX_PROMPT_BYTES: usize = 8192;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("gateway config: {0}")]
    Malformed(#[from] toml::de::Error),
    #[error("environment variable {name}={value:?} is invalid")]
    Env { name: &'static str, value: String },
    #[error("{0}")]
    Invalid(String),
}

fn default_bind() -> SocketAddr {
    "127.0.0.1:8080".parse().expect("literal address")
}

fn default_max_prompt_bytes() -> usize {
    DEFAULT_MAX_PROMPT_BYTES
}

fn default_max_in_flight() -> usize {
    64
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_deadline_secs() -> f64 {
    30.0
}

fn default_cloud() -> BackendSpec {
    BackendSpec::Mock { name: None }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    #[serde(default = "default_max_prompt_bytes")]
    pub max_prompt_bytes: usize,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Static key required on `/v1/infer` when set.
    #[serde(default)]
    pub api_key: Option<String>,
    /// Category table, lexicon and budget; the bundled file when unset.
    #[serde(default)]
    pub privacy_config: Option<PathBuf>,
    /// Gating model JSON; trained on the bundled corpus when unset.
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub demos_k: usize,
    #[serde(default = "default_deadline_secs")]
    pub deadline_secs: f64,
    #[serde(default = "default_cloud")]
    pub cloud: BackendSpec,
    #[serde(default = "default_cloud")]
    pub edge: BackendSpec,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl GatewayConfig {
    pub fn from_toml_str(doc: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let doc = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&doc)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.max_prompt_bytes == 0 || self.max_in_flight == 0 {
            return Err(ConfigError::Invalid(
                "max_prompt_bytes and max_in_flight must be positive".into(),
            ));
        }
        if !(self.deadline_secs.is_finite() && self.deadline_secs > 0.0) {
            return Err(ConfigError::Invalid(
                "deadline_secs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn collab_options(&self) -> CollabOptions {
        CollabOptions {
            k: self.demos_k,
            deadline: Duration::from_secs_f64(self.deadline_secs),
        }
    }

    /// `VEIL_BIND`, `VEIL_MAX_IN_FLIGHT`, `VEIL_MAX_PROMPT_BYTES`, `VEIL_MASTER_SEED`,
    /// `VEIL_API_KEY`, `VEIL_CLOUD_URL`, `VEIL_CLOUD_API_KEY`, `VEIL_EDGE_URL`,
    /// `VEIL_EDGE_API_KEY`.
    pub fn with_env_overrides(self) -> Result<Self, ConfigError> {
        self.with_overrides_from(|name| std::env::var(name).ok())
    }

    pub fn with_overrides_from(
        mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        fn parse<T: std::str::FromStr>(
            name: &'static str,
            value: String,
        ) -> Result<T, ConfigError> {
            value
                .trim()
                .parse()
                .map_err(|_| ConfigError::Env { name, value })
        }
        if let Some(v) = lookup("VEIL_BIND") {
            self.bind = parse("VEIL_BIND", v)?;
        }
        if let Some(v) = lookup("VEIL_MAX_IN_FLIGHT") {
            self.max_in_flight = parse("VEIL_MAX_IN_FLIGHT", v)?;
        }
        if let Some(v) = lookup("VEIL_MAX_PROMPT_BYTES") {
            self.max_prompt_bytes = parse("VEIL_MAX_PROMPT_BYTES", v)?;
        }
        if let Some(v) = lookup("VEIL_MASTER_SEED") {
            self.master_seed = parse("VEIL_MASTER_SEED", v)?;
        }
        if let Some(v) = lookup("VEIL_API_KEY") {
            self.api_key = Some(v);
        }
        for (spec, url_var, key_var) in [
            (&mut self.cloud, "VEIL_CLOUD_URL", "VEIL_CLOUD_API_KEY"),
            (&mut self.edge, "VEIL_EDGE_URL", "VEIL_EDGE_API_KEY"),
        ] {
            if let BackendSpec::Http {
                base_url, api_key, ..
            } = spec
            {
                if let Some(v) = lookup(url_var) {
                    *base_url = v;
                }
                if let Some(v) = lookup(key_var) {
                    *api_key = Some(v);
                }
            }
        }
        self.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use veil_core::collab::BackendRole;
    use veil_core::domain::CategoryTable;

    #[test]
    fn defaults() {
        let c = GatewayConfig::default();
        assert_eq!(c.bind.to_string(), "127.0.0.1:8080");
        assert_eq!(c.max_prompt_bytes, 8192);
        assert_eq!(c.cloud, BackendSpec::Mock { name: None });
        assert_eq!(c.collab_options(), CollabOptions::default());
    }

    #[test]
    fn http_backend_section() {
        let c = GatewayConfig::from_toml_str(
            r#"
            master_seed = 9
            [cloud]
            kind = "http"
            base_url = "http://llm.internal:8000"
            model = "big"
            api_key_env = "NOPE_NOT_SET"
            [edge]
            kind = "mock"
            name = "phone"
            "#,
        )
        .unwrap();
        assert_eq!(c.master_seed, 9);
        let b = c
            .cloud
            .build(BackendRole::Cloud, &CategoryTable::default_table());
        assert_eq!(b.name(), "http-cloud");
        assert_eq!(b.role(), BackendRole::Cloud);
        let e = c
            .edge
            .build(BackendRole::Edge, &CategoryTable::default_table());
        assert_eq!(e.name(), "phone");
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(GatewayConfig::from_toml_str("bogus = 1").is_err());
        assert!(GatewayConfig::from_toml_str("max_in_flight = 0").is_err());
        assert!(GatewayConfig::from_toml_str("[cloud]\nkind = \"grpc\"").is_err());
    }

    #[test]
    fn env_overrides() {
        let env: HashMap<&str, &str> = [
            ("VEIL_BIND", "0.0.0.0:9000"),
            ("VEIL_MASTER_SEED", "77"),
            ("VEIL_CLOUD_URL", "http://other:1"),
            ("VEIL_CLOUD_API_KEY", "s3cret"),
        ]
        .into();
        let base = GatewayConfig::from_toml_str(
            "[cloud]\nkind = \"http\"\nbase_url = \"http://a\"\nmodel = \"m\"",
        )
        .unwrap();
        let c = base
            .with_overrides_from(|k| env.get(k).map(|v| v.to_string()))
            .unwrap();
        assert_eq!(c.bind.port(), 9000);
        assert_eq!(c.master_seed, 77);
        match c.cloud {
            BackendSpec::Http {
                base_url, api_key, ..
            } => {
                assert_eq!(base_url, "http://other:1");
                assert_eq!(api_key.as_deref(), Some("s3cret"));
            }
            other => panic!("{other:?}"),
        }
        let bad = GatewayConfig::default()
            .with_overrides_from(|k| (k == "VEIL_MAX_IN_FLIGHT").then(|| "many".into()));
        assert!(matches!(
            bad,
            Err(ConfigError::Env {
                name: "VEIL_MAX_IN_FLIGHT",
                ..
            })
        ));
    }
}
