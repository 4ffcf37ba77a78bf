//! Chat-completion judge backends behind one retrying, caching client.

mod client;
mod live;
mod oracle;
mod scripted;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use client::{Gate, JudgeClient, ResponseCache, RetryPolicy};
pub use live::{LiveBackend, LiveConfig};
pub use oracle::{NoiseSpec, QualityBook, SyntheticOracle};
pub use scripted::ScriptedBackend;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JudgeError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend refused: {0}")]
    Refusal(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend protocol violation: {0}")]
    Protocol(String),
    #[error("judge configuration: {0}")]
    Config(String),
}

/// Failure reported by a single backend call.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: rate limits, timeouts, 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("fatal: {0}")]
    Fatal(String),
    /// Empty or policy-filtered completion. Surfaced, never retried.
    #[error("refused: {0}")]
    Refused(String),
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    /// Must return exactly `request.decoding.num_samples` completions.
    fn call(&self, request: &JudgeRequest) -> Result<Vec<String>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodingStrategy {
    Greedy,
    BeamSearch { beam_size: u32 },
    TopP { p: f64, temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub strategy: DecodingStrategy,
    pub num_samples: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self::greedy()
    }
}

impl DecodingParams {
    pub fn greedy() -> Self {
        Self {
            strategy: DecodingStrategy::Greedy,
            num_samples: 1,
        }
    }

    pub fn beam(beam_size: u32) -> Self {
        Self {
            strategy: DecodingStrategy::BeamSearch { beam_size },
            num_samples: 1,
        }
    }

    pub fn top_p(p: f64, temperature: f64, num_samples: u32) -> Self {
        Self {
            strategy: DecodingStrategy::TopP { p, temperature },
            num_samples,
        }
    }

    /// Five nucleus samples at p = temperature = 0.9, for self-consistency.
    pub fn self_consistency() -> Self {
        Self::top_p(0.9, 0.9, 5)
    }

    pub fn validate(&self) -> Result<(), JudgeError> {
        let bad = |m: String| Err(JudgeError::InvalidRequest(m));
        if self.num_samples == 0 {
            return bad("num_samples must be at least 1".into());
        }
        match self.strategy {
            DecodingStrategy::TopP { p, temperature } => {
                if !(p > 0.0 && p <= 1.0) {
                    return bad(format!("top-p {p} outside (0, 1]"));
                }
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return bad(format!("temperature {temperature} must be positive"));
                }
            }
            DecodingStrategy::BeamSearch { beam_size: 0 } => {
                return bad("beam_size must be at least 1".into());
            }
            _ if self.num_samples > 1 => {
                return bad("multiple samples require top-p sampling".into());
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub messages: Vec<Message>,
    pub decoding: DecodingParams,
    /// Correlation id for logs; not part of the cache key.
    #[serde(default)]
    pub tag: String,
}

impl JudgeRequest {
    /// Single user turn.
    pub fn prompt(
        text: impl Into<String>,
        decoding: DecodingParams,
        tag: impl Into<String>,
    ) -> Self {
        Self {
            messages: vec![Message::user(text)],
            decoding,
            tag: tag.into(),
        }
    }

    pub fn validate(&self) -> Result<(), JudgeError> {
        let Some(first) = self.messages.first() else {
            return Err(JudgeError::InvalidRequest("no messages".into()));
        };
        if first.role == Role::Assistant {
            return Err(JudgeError::InvalidRequest(
                "conversation must open with a system or user turn".into(),
            ));
        }
        let mut prev = first.role;
        for m in &self.messages[1..] {
            let ok = matches!(
                (prev, m.role),
                (Role::System, Role::User)
                    | (Role::User, Role::Assistant)
                    | (Role::Assistant, Role::User)
            );
            if !ok {
                return Err(JudgeError::InvalidRequest(format!(
                    "{:?} turn cannot follow {:?}",
                    m.role, prev
                )));
            }
            prev = m.role;
        }
        self.decoding.validate()
    }

    /// Hex SHA-256 over the canonical JSON of messages and decoding.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            messages: &'a [Message],
            decoding: &'a DecodingParams,
        }
        let bytes = serde_json::to_vec(&Key {
            messages: &self.messages,
            decoding: &self.decoding,
        })
        .expect("request serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Text of the final user turn.
    pub fn last_user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub completions: Vec<String>,
    pub backend_id: String,
    pub cached: bool,
}

impl JudgeResponse {
    pub fn first(&self) -> &str {
        &self.completions[0]
    }
}
