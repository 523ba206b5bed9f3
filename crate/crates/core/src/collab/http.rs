//! Chat-completion HTTP backend. Wire format: see `docs/backend-protocol.md`.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendRole, Capability, Completion, ModelBackend, Usage};
use crate::domain::token_count;

fn default_path() -> String {
    "/v1/chat/completions".into()
}

fn default_probe_path() -> String {
    "/v1/models".into()
}

fn default_auth_header() -> String {
    "Authorization".into()
}

fn default_auth_scheme() -> String {
    "Bearer".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatConfig {
    pub name: String,
    pub role: BackendRole,
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_path")]
    pub path: String,
    #[serde(default = "default_probe_path")]
    pub probe_path: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    /// Prefix placed before the key; empty sends the bare key.
    #[serde(default = "default_auth_scheme")]
    pub auth_scheme: String,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub max_concurrency: Option<usize>,
}

impl ChatConfig {
    pub fn new(name: &str, role: BackendRole, base_url: &str, model: &str) -> Self {
        Self {
            name: name.into(),
            role,
            base_url: base_url.into(),
            model: model.into(),
            path: default_path(),
            probe_path: default_probe_path(),
            api_key: None,
            auth_header: default_auth_header(),
            auth_scheme: default_auth_scheme(),
            max_tokens: None,
            max_concurrency: None,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }

    fn auth_value(&self) -> Option<String> {
        self.api_key.as_ref().map(|key| {
            if self.auth_scheme.is_empty() {
                key.clone()
            } else {
                format!("{} {key}", self.auth_scheme)
            }
        })
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Debug, Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

pub struct ChatBackend {
    config: ChatConfig,
    cap: Capability,
}

impl ChatBackend {
    pub fn new(config: ChatConfig) -> Self {
        let cap = Capability {
            name: config.name.clone(),
            role: config.role,
            max_concurrency: config.max_concurrency,
        };
        Self { config, cap }
    }

    pub fn config(&self) -> &ChatConfig {
        &self.config
    }

    fn agent(&self, deadline: Duration) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(deadline))
            .build()
            .into()
    }

    fn map_error(&self, e: ureq::Error, deadline: Duration) -> BackendError {
        let backend = self.cap.name.clone();
        match e {
            ureq::Error::Timeout(_) => BackendError::Timeout {
                backend,
                after: deadline,
            },
            ureq::Error::StatusCode(status) => BackendError::Status { backend, status },
            ureq::Error::Json(e) => BackendError::Malformed {
                backend,
                message: e.to_string(),
            },
            other => BackendError::Transport {
                backend,
                message: other.to_string(),
            },
        }
    }
}

impl ModelBackend for ChatBackend {
    fn capability(&self) -> &Capability {
        &self.cap
    }

    fn complete(&self, context: &str, deadline: Duration) -> Result<Completion, BackendError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: context,
            }],
            temperature: 0,
            max_tokens: self.config.max_tokens,
        };
        let payload = serde_json::to_vec(&body).map_err(|e| BackendError::Malformed {
            backend: self.cap.name.clone(),
            message: e.to_string(),
        })?;
        let started = Instant::now();
        let mut request = self
            .agent(deadline)
            .post(self.config.url(&self.config.path))
            .header("Content-Type", "application/json");
        if let Some(auth) = self.config.auth_value() {
            request = request.header(self.config.auth_header.as_str(), auth.as_str());
        }
        let reply: ChatResponse = request
            .send(&payload[..])
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| self.map_error(e, deadline))?;
        let latency = started.elapsed();

        let text = reply
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Malformed {
                backend: self.cap.name.clone(),
                message: "no choices".into(),
            })?
            .message
            .content
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(BackendError::EmptyCompletion {
                backend: self.cap.name.clone(),
            });
        }
        let usage = match reply.usage {
            Some(u) => Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            },
            None => Usage {
                prompt_tokens: token_count(context) as u64,
                completion_tokens: token_count(&text) as u64,
            },
        };
        Ok(Completion {
            text,
            usage,
            latency,
        })
    }

    /// Any HTTP response, including an error status, counts as reachable.
    fn probe(&self) -> Result<(), BackendError> {
        let deadline = Duration::from_secs(2);
        match self
            .agent(deadline)
            .get(self.config.url(&self.config.probe_path))
            .call()
        {
            Ok(_) | Err(ureq::Error::StatusCode(_)) => Ok(()),
            Err(e) => Err(self.map_error(e, deadline)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    struct Captured {
        request_line: String,
        headers: Vec<(String, String)>,
        body: String,
    }

    /// One-shot server answering with `status` and `reply`.
    fn serve_once(status: u16, reply: &'static str) -> (String, mpsc::Receiver<Captured>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                headers.push((k.trim().to_lowercase(), v.trim().to_string()));
            }
            let len: usize = headers
                .iter()
                .find(|(k, _)| k == "content-length")
                .map(|(_, v)| v.parse().unwrap())
                .unwrap_or(0);
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
            tx.send(Captured {
                request_line: request_line.trim_end().to_string(),
                headers,
                body: String::from_utf8(body).unwrap(),
            })
            .unwrap();
        });
        (addr, rx)
    }

    fn config(base: &str) -> ChatConfig {
        let mut c = ChatConfig::new("remote", BackendRole::Cloud, base, "m-1");
        c.api_key = Some("k3y".into());
        c
    }

    #[test]
    fn request_and_response_mapping() {
        let (base, rx) = serve_once(
            200,
            r#"{"choices":[{"index":0,"message":{"role":"assistant","content":"INTENT: x\n- y"}}],"usage":{"prompt_tokens":11,"completion_tokens":4}}"#,
        );
        let b = ChatBackend::new(config(&base));
        let c = b
            .complete("hello \"world\"", Duration::from_secs(5))
            .unwrap();
        assert_eq!(c.text, "INTENT: x\n- y");
        assert_eq!(
            c.usage,
            Usage {
                prompt_tokens: 11,
                completion_tokens: 4
            }
        );

        let got = rx.recv().unwrap();
        assert_eq!(got.request_line, "POST /v1/chat/completions HTTP/1.1");
        assert!(got
            .headers
            .contains(&("authorization".into(), "Bearer k3y".into())));
        assert_eq!(
            got.body,
            r#"{"model":"m-1","messages":[{"role":"user","content":"hello \"world\""}],"temperature":0}"#
        );
    }

    #[test]
    fn custom_path_header_and_missing_usage() {
        let (base, rx) = serve_once(200, r#"{"choices":[{"message":{"content":"two words"}}]}"#);
        let mut cfg = config(&format!("{base}/"));
        cfg.path = "/api/chat".into();
        cfg.auth_header = "X-Api-Key".into();
        cfg.auth_scheme = String::new();
        cfg.max_tokens = Some(64);
        let c = ChatBackend::new(cfg)
            .complete("a b c", Duration::from_secs(5))
            .unwrap();
        assert_eq!(
            c.usage,
            Usage {
                prompt_tokens: 3,
                completion_tokens: 2
            }
        );
        let got = rx.recv().unwrap();
        assert_eq!(got.request_line, "POST /api/chat HTTP/1.1");
        assert!(got.headers.contains(&("x-api-key".into(), "k3y".into())));
        assert!(got.body.ends_with(r#""temperature":0,"max_tokens":64}"#));
    }

    #[test]
    fn error_mapping() {
        let (base, _rx) = serve_once(503, "{}");
        let e = ChatBackend::new(config(&base))
            .complete("x", Duration::from_secs(5))
            .unwrap_err();
        assert!(matches!(e, BackendError::Status { status: 503, .. }));

        let (base, _rx) = serve_once(200, r#"{"choices":[{"message":{"content":""}}]}"#);
        let e = ChatBackend::new(config(&base))
            .complete("x", Duration::from_secs(5))
            .unwrap_err();
        assert!(matches!(e, BackendError::EmptyCompletion { .. }));

        let (base, _rx) = serve_once(200, r#"{"choices":[]}"#);
        let e = ChatBackend::new(config(&base))
            .complete("x", Duration::from_secs(5))
            .unwrap_err();
        assert!(matches!(e, BackendError::Malformed { .. }));
    }

    #[test]
    fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let hold = std::thread::spawn(move || {
            let conn = listener.accept();
            std::thread::sleep(Duration::from_millis(800));
            drop(conn);
        });
        let start = Instant::now();
        let e = ChatBackend::new(config(&base))
            .complete("x", Duration::from_millis(200))
            .unwrap_err();
        assert!(matches!(e, BackendError::Timeout { .. }), "{e:?}");
        assert!(start.elapsed() < Duration::from_millis(700));
        hold.join().unwrap();
    }

    #[test]
    fn probe_reachability() {
        let (base, _rx) = serve_once(404, "{}");
        assert!(ChatBackend::new(config(&base)).probe().is_ok());
        let closed = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", closed.local_addr().unwrap());
        drop(closed);
        assert!(ChatBackend::new(config(&base)).probe().is_err());
    }
}
