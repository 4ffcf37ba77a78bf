use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, DecodingStrategy, JudgeError, JudgeRequest};

/// OpenAI-compatible chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    /// Prefer `api_key_env`; a key written here is used only if the variable is unset.
    pub api_key: Option<String>,
    pub api_key_env: String,
    pub timeout_secs: u64,
    /// Log request and response bodies at debug level, keys redacted.
    pub verbose: bool,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4".into(),
            api_key: None,
            api_key_env: "EVALINSTRUCT_API_KEY".into(),
            timeout_secs: 120,
            verbose: false,
        }
    }
}

pub struct LiveBackend {
    id: String,
    url: String,
    config: LiveConfig,
    key: Option<String>,
    http: reqwest::blocking::Client,
}

/// Replace every occurrence of `secret` with asterisks.
fn redact(text: &str, secret: Option<&str>) -> String {
    match secret {
        Some(s) if !s.is_empty() => text.replace(s, "***"),
        _ => text.to_string(),
    }
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, JudgeError> {
        let key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .or_else(|| config.api_key.clone());
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| JudgeError::Config(format!("http client: {e}")))?;
        let url = format!("{}/chat/completions", config.endpoint.trim_end_matches('/'));
        Ok(Self {
            id: format!("live:{}", config.model),
            url,
            config,
            key,
            http,
        })
    }

    fn body(&self, request: &JudgeRequest) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": request.messages,
            "n": request.decoding.num_samples,
        });
        let extra = match request.decoding.strategy {
            DecodingStrategy::Greedy => json!({ "temperature": 0.0 }),
            DecodingStrategy::TopP { p, temperature } => {
                json!({ "temperature": temperature, "top_p": p })
            }
            // vLLM's OpenAI server accepts these extensions.
            DecodingStrategy::BeamSearch { beam_size } => {
                json!({ "temperature": 0.0, "use_beam_search": true, "best_of": beam_size })
            }
        };
        let map = body.as_object_mut().expect("object literal");
        map.extend(extra.as_object().expect("object literal").clone());
        body
    }
}

impl Backend for LiveBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, request: &JudgeRequest) -> Result<Vec<String>, BackendError> {
        let body = self.body(request);
        let secret = self.key.as_deref();
        if self.config.verbose {
            log::debug!(
                "POST {} [{}] {}",
                self.url,
                request.tag,
                redact(&body.to_string(), secret)
            );
        }
        let mut call = self.http.post(&self.url).json(&body);
        if let Some(key) = secret {
            call = call.bearer_auth(key);
        }
        let response = call
            .send()
            .map_err(|e| BackendError::Transient(redact(&e.to_string(), secret)))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transient(redact(&e.to_string(), secret)))?;
        if self.config.verbose {
            log::debug!("{} [{}] {}", status, request.tag, redact(&text, secret));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let snippet: String = redact(&text, secret).chars().take(200).collect();
            return Err(BackendError::Fatal(format!("HTTP {status}: {snippet}")));
        }
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Fatal(format!("invalid JSON response: {e}")))?;
        let choices = parsed["choices"]
            .as_array()
            .ok_or_else(|| BackendError::Fatal("response has no choices".into()))?;
        let mut completions = Vec::with_capacity(choices.len());
        for choice in choices {
            if choice["finish_reason"] == "content_filter" {
                return Err(BackendError::Refused("content_filter".into()));
            }
            match choice["message"]["content"].as_str() {
                Some(c) if !c.trim().is_empty() => completions.push(c.to_string()),
                _ => return Err(BackendError::Refused("empty completion".into())),
            }
        }
        Ok(completions)
    }
}
