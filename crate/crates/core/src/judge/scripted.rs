use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use super::{Backend, BackendError, JudgeRequest};

type Responder = Box<dyn Fn(&JudgeRequest) -> Result<Vec<String>, BackendError> + Send + Sync>;

/// Canned replies for tests and offline runs.
///
/// Lookup order: queued failures, exact request digest, first substring rule
/// matching the last user turn, then the fallback responder.
pub struct ScriptedBackend {
    id: String,
    by_digest: HashMap<String, Vec<String>>,
    rules: Vec<(String, String)>,
    failures: Mutex<VecDeque<BackendError>>,
    fallback: Option<Responder>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            by_digest: HashMap::new(),
            rules: Vec::new(),
            failures: Mutex::new(VecDeque::new()),
            fallback: None,
        }
    }

    pub fn with_digest(mut self, digest: impl Into<String>, completions: Vec<String>) -> Self {
        self.by_digest.insert(digest.into(), completions);
        self
    }

    /// Reply `reply` (once per requested sample) when the prompt contains `needle`.
    pub fn with_rule(mut self, needle: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push((needle.into(), reply.into()));
        self
    }

    /// Failures returned, in order, by the next calls.
    pub fn with_failures(self, failures: Vec<BackendError>) -> Self {
        self.failures
            .lock()
            .expect("failure queue")
            .extend(failures);
        self
    }

    pub fn with_fallback(
        mut self,
        f: impl Fn(&JudgeRequest) -> Result<Vec<String>, BackendError> + Send + Sync + 'static,
    ) -> Self {
        self.fallback = Some(Box::new(f));
        self
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, request: &JudgeRequest) -> Result<Vec<String>, BackendError> {
        if let Some(failure) = self.failures.lock().expect("failure queue").pop_front() {
            return Err(failure);
        }
        if let Some(hit) = self.by_digest.get(&request.digest()) {
            return Ok(hit.clone());
        }
        let prompt = request.last_user_text();
        if let Some((_, reply)) = self
            .rules
            .iter()
            .find(|(needle, _)| prompt.contains(needle.as_str()))
        {
            return Ok(vec![reply.clone(); request.decoding.num_samples as usize]);
        }
        match &self.fallback {
            Some(f) => f(request),
            None => Err(BackendError::Fatal(format!(
                "no scripted reply for request {:?}",
                request.tag
            ))),
        }
    }
}
