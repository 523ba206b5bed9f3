use serde::Deserialize;

use super::http::{ChatBackend, ChatConfig};
use super::mock::{MockCloud, MockEdge};
use super::{Backend, BackendRole};
use crate::domain::CategoryTable;

/// Backend section: `kind = "mock"` or `kind = "http"` with chat-completion
/// client fields.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendSpec {
    Mock {
        #[serde(default)]
        name: Option<String>,
    },
    Http {
        #[serde(default)]
        name: Option<String>,
        base_url: String,
        model: String,
        #[serde(default)]
        path: Option<String>,
        #[serde(default)]
        probe_path: Option<String>,
        #[serde(default)]
        api_key: Option<String>,
        /// Read the key from this environment variable instead.
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        auth_header: Option<String>,
        #[serde(default)]
        auth_scheme: Option<String>,
        #[serde(default)]
        max_tokens: Option<u32>,
        #[serde(default)]
        max_concurrency: Option<usize>,
    },
}

impl BackendSpec {
    pub fn build(&self, role: BackendRole, table: &CategoryTable) -> Backend {
        match self {
            BackendSpec::Mock { name } => {
                let name = name.clone().unwrap_or_else(|| format!("mock-{role}"));
                match role {
                    BackendRole::Cloud => Backend::from_backend(MockCloud::new(&name)),
                    BackendRole::Edge => Backend::from_backend(MockEdge::new(&name, table.clone())),
                }
            }
            BackendSpec::Http {
                name,
                base_url,
                model,
                path,
                probe_path,
                api_key,
                api_key_env,
                auth_header,
                auth_scheme,
                max_tokens,
                max_concurrency,
            } => {
                let name = name.clone().unwrap_or_else(|| format!("http-{role}"));
                let mut c = ChatConfig::new(&name, role, base_url, model);
                if let Some(p) = path {
                    c.path = p.clone();
                }
                if let Some(p) = probe_path {
                    c.probe_path = p.clone();
                }
                c.api_key = api_key
                    .clone()
                    .or_else(|| api_key_env.as_ref().and_then(|v| std::env::var(v).ok()));
                if let Some(h) = auth_header {
                    c.auth_header = h.clone();
                }
                if let Some(s) = auth_scheme {
                    c.auth_scheme = s.clone();
                }
                c.max_tokens = *max_tokens;
                c.max_concurrency = *max_concurrency;
                Backend::from_backend(ChatBackend::new(c))
            }
        }
    }
}
