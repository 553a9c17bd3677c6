//! Access to the frozen recommendation and reflection LLMs.
//!
//! Every call goes through [`LlmBackend`]. Concrete backends are the
//! OpenAI-compatible HTTP client, the scenario-driven mock, and the
//! content-addressed disk cache that wraps either of them.

pub mod cache;
pub mod http;
pub mod mock;
pub mod parse;
pub mod template;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;
pub use cache::CachedBackend;
pub use http::{HttpBackend, RetryPolicy};
pub use mock::{mock_policy, MockBackend, MockScenario};
pub use parse::{parse_ranking, CandidateRef, ParseReport, RankedList};
pub use template::{render, render_raw, PromptInstance, PromptSlots, TemplateError, TemplateId};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request {request_id} timed out after {attempts} attempt(s)")]
    Timeout { request_id: String, attempts: u32 },
    #[error("request {request_id} failed after {attempts} attempt(s): {message}")]
    Transport {
        request_id: String,
        attempts: u32,
        message: String,
    },
    #[error("request {request_id} rate limited after {attempts} attempt(s)")]
    RateLimited { request_id: String, attempts: u32 },
    #[error("request {request_id} returned HTTP {status}: {body}")]
    Status {
        request_id: String,
        status: u16,
        body: String,
    },
    #[error("request {request_id} returned no content")]
    EmptyResponse { request_id: String },
    #[error("cache I/O at {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown mock scenario {0:?}")]
    UnknownScenario(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// One completion call. `user_id` travels with the request for auditing and
/// for the mock's hidden scoring; the HTTP backend sends only the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub template: TemplateId,
    pub user_id: Option<String>,
    pub prompt: String,
}

impl CompletionRequest {
    pub fn new(prompt: &PromptInstance, user_id: &str) -> Self {
        Self {
            template: prompt.template_id,
            user_id: Some(user_id.to_string()),
            prompt: prompt.rendered_text.clone(),
        }
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError>;

    fn model(&self) -> &str;

    fn temperature(&self) -> f64 {
        0.0
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }

    fn model(&self) -> &str {
        (**self).model()
    }

    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }

    fn model(&self) -> &str {
        (**self).model()
    }

    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
}

/// Backend driven by a closure; handy for scripted tests.
pub struct FnBackend<F> {
    name: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, LlmError> + Send + Sync,
{
    pub fn new(name: &str, f: F) -> Self {
        Self { name: name.to_string(), f }
    }
}

impl<F> LlmBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, LlmError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (self.f)(request)
    }

    fn model(&self) -> &str {
        &self.name
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmBackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub request_timeout_secs: f64,
    pub retry: RetryPolicy,
    pub cache_dir: Option<PathBuf>,
    pub audit_log: Option<PathBuf>,
    pub max_concurrency: usize,
    pub token_budget: Option<usize>,
    pub determinism: bool,
    /// Mock scenario id.
    pub scenario: String,
}

pub const ENDPOINT_ENV: &str = "REFLECTREC_LLM_ENDPOINT";
pub const API_KEY_ENV: &str = "REFLECTREC_LLM_API_KEY";
pub const MODEL_ENV: &str = "REFLECTREC_LLM_MODEL";

impl Default for LlmBackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: "http://localhost:8000/v1".into(),
            model: "Meta-Llama-3-8B-Instruct".into(),
            api_key_env: API_KEY_ENV.into(),
            temperature: 0.0,
            max_tokens: 1024,
            request_timeout_secs: 120.0,
            retry: RetryPolicy::default(),
            cache_dir: None,
            audit_log: None,
            max_concurrency: 4,
            token_budget: Some(7000),
            determinism: false,
            scenario: "neutral".into(),
        }
    }
}

impl LlmBackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.determinism {
            if self.temperature != 0.0 {
                return Err(LlmError::Config("determinism mode requires temperature 0".into()));
            }
            if self.cache_dir.is_none() {
                return Err(LlmError::Config("determinism mode requires a cache directory".into()));
            }
        }
        if self.max_concurrency == 0 {
            return Err(LlmError::Config("max_concurrency must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies endpoint/model overrides from the environment.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(v) = std::env::var(ENDPOINT_ENV) {
            self.endpoint = v;
        }
        if let Ok(v) = std::env::var(MODEL_ENV) {
            self.model = v;
        }
        self
    }
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    template: TemplateId,
    user_id: Option<&'a str>,
    model: &'a str,
    prompt_sha256: String,
    ok: bool,
    response: Option<&'a str>,
    error: Option<String>,
}

/// Front door for all LLM traffic: a backend plus an optional JSONL audit log.
pub struct Gateway {
    backend: Box<dyn LlmBackend>,
    audit: Option<Mutex<File>>,
    token_budget: Option<usize>,
}

impl Gateway {
    pub fn new(backend: Box<dyn LlmBackend>) -> Self {
        Self {
            backend,
            audit: None,
            token_budget: None,
        }
    }

    pub fn with_audit_log(mut self, path: &std::path::Path) -> Result<Self, LlmError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| LlmError::Cache {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| LlmError::Cache {
                path: path.to_path_buf(),
                source,
            })?;
        self.audit = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn with_token_budget(mut self, budget: Option<usize>) -> Self {
        self.token_budget = budget;
        self
    }

    pub fn token_budget(&self) -> Option<usize> {
        self.token_budget
    }

    pub fn backend(&self) -> &dyn LlmBackend {
        self.backend.as_ref()
    }

    pub fn render(&self, template: TemplateId, slots: &PromptSlots) -> Result<PromptInstance, LlmError> {
        Ok(render(template, slots, self.token_budget)?)
    }

    pub fn complete(&self, prompt: &PromptInstance, user_id: &str) -> Result<String, LlmError> {
        let request = CompletionRequest::new(prompt, user_id);
        let result = self.backend.complete(&request);
        if let Some(audit) = &self.audit {
            let record = AuditRecord {
                template: request.template,
                user_id: request.user_id.as_deref(),
                model: self.backend.model(),
                prompt_sha256: sha256_hex(request.prompt.as_bytes()),
                ok: result.is_ok(),
                response: result.as_ref().ok().map(String::as_str),
                error: result.as_ref().err().map(|e| e.to_string()),
            };
            if let Ok(line) = serde_json::to_string(&record) {
                let mut f = audit.lock().unwrap_or_else(|p| p.into_inner());
                // audit failures never fail the request
                let _ = writeln!(f, "{line}");
            }
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinism_needs_zero_temperature_and_cache() {
        let mut cfg = LlmBackendConfig {
            determinism: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.cache_dir = Some("cache".into());
        cfg.validate().unwrap();
        cfg.temperature = 0.7;
        assert!(cfg.validate().is_err());
        cfg.determinism = false;
        cfg.validate().unwrap();
    }

    #[test]
    fn audit_log_records_each_call() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("audit.jsonl");
        let gw = Gateway::new(Box::new(FnBackend::new("echo", |r: &CompletionRequest| Ok(r.prompt.len().to_string()))))
            .with_audit_log(&log)
            .unwrap();
        let slots = PromptSlots {
            history: vec!["A".into()],
            candidates: vec!["B".into()],
            ..Default::default()
        };
        let p = gw.render(TemplateId::Rec, &slots).unwrap();
        gw.complete(&p, "u1").unwrap();
        gw.complete(&p, "u2").unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"user_id\":\"u2\""));
    }
}
