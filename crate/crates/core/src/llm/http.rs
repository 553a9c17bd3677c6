//! Blocking client for OpenAI-compatible `/chat/completions` endpoints.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{CompletionRequest, LlmBackend, LlmBackendConfig, LlmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_backoff_ms: 500,
            max_backoff_ms: 8000,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.base_backoff_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_backoff_ms))
    }
}

pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    max_tokens: u32,
    retry: RetryPolicy,
    counter: AtomicU64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

enum Attempt {
    Done(String),
    Retry(LlmError),
    Fatal(LlmError),
}

impl HttpBackend {
    pub fn from_config(config: &LlmBackendConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.request_timeout_secs.max(0.001))))
            .http_status_as_error(false)
            .build()
            .into();
        let base = config.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        Self {
            agent,
            url,
            model: config.model.clone(),
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            retry: config.retry.clone(),
            counter: AtomicU64::new(0),
        }
    }

    fn attempt(&self, request_id: &str, body: &serde_json::Value, attempts: u32) -> Attempt {
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Attempt::Retry(LlmError::Timeout {
                    request_id: request_id.into(),
                    attempts,
                })
            }
            Err(e) => {
                return Attempt::Retry(LlmError::Transport {
                    request_id: request_id.into(),
                    attempts,
                    message: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        if status == 429 {
            return Attempt::Retry(LlmError::RateLimited {
                request_id: request_id.into(),
                attempts,
            });
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            let err = LlmError::Status {
                request_id: request_id.into(),
                status,
                body: text,
            };
            return if status >= 500 { Attempt::Retry(err) } else { Attempt::Fatal(err) };
        }
        match resp.body_mut().read_json::<ChatResponse>() {
            Ok(parsed) => match parsed.choices.into_iter().next().and_then(|c| c.message.content) {
                Some(text) if !text.trim().is_empty() => Attempt::Done(text),
                _ => Attempt::Fatal(LlmError::EmptyResponse {
                    request_id: request_id.into(),
                }),
            },
            Err(e) => Attempt::Retry(LlmError::Transport {
                request_id: request_id.into(),
                attempts,
                message: format!("malformed response body: {e}"),
            }),
        }
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let request_id = format!("{}-{n}", request.user_id.as_deref().unwrap_or("anon"));
        let body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        let mut attempt = 0;
        loop {
            match self.attempt(&request_id, &body, attempt + 1) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => {
                    if attempt >= self.retry.max_retries {
                        return Err(e);
                    }
                    std::thread::sleep(self.retry.backoff(attempt));
                    attempt += 1;
                }
            }
        }
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::TemplateId;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves the given (status, body) pairs in order, one per connection.
    fn scripted_server(script: Vec<(u16, String)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body) in script {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        format!("http://{addr}/v1")
    }

    fn backend(endpoint: String, max_retries: u32) -> HttpBackend {
        HttpBackend::from_config(&LlmBackendConfig {
            kind: crate::llm::BackendKind::Http,
            endpoint,
            api_key_env: "REFLECTREC_TEST_UNSET_KEY".into(),
            request_timeout_secs: 5.0,
            retry: RetryPolicy {
                max_retries,
                base_backoff_ms: 1,
                max_backoff_ms: 2,
            },
            ..Default::default()
        })
    }

    fn req() -> CompletionRequest {
        CompletionRequest {
            template: TemplateId::Rec,
            user_id: Some("u1".into()),
            prompt: "hello".into(),
        }
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"1. Halo"}}]}"#;

    #[test]
    fn retries_rate_limit_then_succeeds() {
        let url = scripted_server(vec![(429, "{}".into()), (503, "busy".into()), (200, OK.into())]);
        assert_eq!(backend(url, 3).complete(&req()).unwrap(), "1. Halo");
    }

    #[test]
    fn gives_up_after_max_retries() {
        let url = scripted_server(vec![(429, "{}".into()), (429, "{}".into())]);
        let err = backend(url, 1).complete(&req()).unwrap_err();
        assert!(matches!(err, LlmError::RateLimited { attempts: 2, .. }), "{err}");
    }

    #[test]
    fn client_errors_are_not_retried() {
        let url = scripted_server(vec![(400, "bad".into())]);
        let err = backend(url, 3).complete(&req()).unwrap_err();
        assert!(matches!(err, LlmError::Status { status: 400, .. }), "{err}");
    }

    #[test]
    fn empty_content_is_an_error() {
        let url = scripted_server(vec![(200, r#"{"choices":[{"message":{"content":"  "}}]}"#.into())]);
        let err = backend(url, 0).complete(&req()).unwrap_err();
        assert!(matches!(err, LlmError::EmptyResponse { .. }));
    }

    #[test]
    fn backoff_is_capped() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(0), Duration::from_millis(500));
        assert_eq!(p.backoff(2), Duration::from_millis(2000));
        assert_eq!(p.backoff(10), Duration::from_millis(8000));
    }
}
