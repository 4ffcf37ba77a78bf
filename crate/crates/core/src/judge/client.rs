use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, JudgeError, JudgeRequest, JudgeResponse};

/// Exponential backoff without jitter, so delays are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub multiplier: f64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
            multiplier: 2.0,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), JudgeError> {
        if self.max_attempts == 0 {
            return Err(JudgeError::Config(
                "retry.max_attempts must be at least 1".into(),
            ));
        }
        if !(self.multiplier >= 1.0 && self.multiplier.is_finite()) {
            return Err(JudgeError::Config(
                "retry.multiplier must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Delay before retry number `retry` (0 = first retry).
    pub fn delay(&self, retry: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.multiplier.powi(retry as i32);
        Duration::from_millis(ms.min(self.max_delay_ms as f64) as u64)
    }
}

/// Digest-keyed completion cache, in memory with optional on-disk mirror.
#[derive(Debug, Default)]
pub struct ResponseCache {
    memory: Mutex<HashMap<String, Vec<String>>>,
    dir: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, JudgeError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .map_err(|e| JudgeError::Config(format!("cache dir {}: {e}", dir.display())))?;
        Ok(Self {
            memory: Mutex::default(),
            dir: Some(dir),
        })
    }

    fn path(dir: &Path, digest: &str) -> PathBuf {
        dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Option<Vec<String>> {
        if let Some(hit) = self.memory.lock().expect("cache lock").get(digest) {
            return Some(hit.clone());
        }
        let dir = self.dir.as_ref()?;
        let text = std::fs::read_to_string(Self::path(dir, digest)).ok()?;
        let hit: Vec<String> = serde_json::from_str(&text).ok()?;
        self.memory
            .lock()
            .expect("cache lock")
            .insert(digest.to_string(), hit.clone());
        Some(hit)
    }

    pub fn put(&self, digest: &str, completions: &[String]) {
        self.memory
            .lock()
            .expect("cache lock")
            .insert(digest.to_string(), completions.to_vec());
        if let Some(dir) = &self.dir {
            let tmp = dir.join(format!(".{digest}.tmp"));
            let body = serde_json::to_vec(completions).expect("strings serialize");
            let written = std::fs::write(&tmp, body)
                .and_then(|_| std::fs::rename(&tmp, Self::path(dir, digest)));
            if let Err(e) = written {
                log::warn!("cache write for {digest} failed: {e}");
            }
        }
    }

    pub fn len(&self) -> usize {
        self.memory.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Counting semaphore bounding in-flight backend calls.
#[derive(Debug)]
pub struct Gate {
    limit: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

pub struct Permit<'a> {
    gate: &'a Gate,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.gate.in_use.lock().expect("gate lock") -= 1;
        self.gate.freed.notify_one();
    }
}

impl Gate {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            in_use: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut in_use = self.in_use.lock().expect("gate lock");
        while *in_use >= self.limit {
            in_use = self.freed.wait(in_use).expect("gate lock");
        }
        *in_use += 1;
        self.peak.fetch_max(*in_use, Ordering::SeqCst);
        Permit { gate: self }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    /// Highest number of permits held at once so far.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct JudgeClient {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    cache: Option<ResponseCache>,
    gate: Gate,
    sleeper: Sleeper,
    backend_calls: AtomicU64,
}

impl JudgeClient {
    /// Default retry policy, in-memory cache, 8 in-flight calls.
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            cache: Some(ResponseCache::in_memory()),
            gate: Gate::new(8),
            sleeper: Arc::new(std::thread::sleep),
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_cache(mut self, cache: Option<ResponseCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_max_inflight(mut self, limit: usize) -> Self {
        self.gate = Gate::new(limit);
        self
    }

    /// Replace `thread::sleep` between retries (tests record delays instead).
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    /// Calls that reached the backend, retries included.
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        request.validate()?;
        let digest = request.digest();
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&digest)) {
            log::trace!("cache hit {} ({digest})", request.tag);
            return Ok(JudgeResponse {
                completions: hit,
                backend_id: self.backend.id().to_string(),
                cached: true,
            });
        }
        let expected = request.decoding.num_samples as usize;
        let mut attempt = 0;
        let completions = loop {
            attempt += 1;
            let result = {
                let _permit = self.gate.acquire();
                self.backend_calls.fetch_add(1, Ordering::SeqCst);
                self.backend.call(request)
            };
            match result {
                Ok(c) => break c,
                Err(BackendError::Refused(why)) => return Err(JudgeError::Refusal(why)),
                Err(BackendError::Fatal(why)) => {
                    return Err(JudgeError::Transport {
                        attempts: attempt,
                        message: why,
                    });
                }
                Err(BackendError::Transient(why)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(JudgeError::Transport {
                            attempts: attempt,
                            message: why,
                        });
                    }
                    let delay = self.retry.delay(attempt - 1);
                    log::debug!(
                        "{}: transient failure ({why}); retry {attempt} in {delay:?}",
                        request.tag
                    );
                    (self.sleeper)(delay);
                }
            }
        };
        if completions.len() != expected {
            return Err(JudgeError::Protocol(format!(
                "expected {expected} completions, got {}",
                completions.len()
            )));
        }
        if completions.iter().any(|c| c.trim().is_empty()) {
            return Err(JudgeError::Refusal("empty completion".into()));
        }
        if let Some(cache) = &self.cache {
            cache.put(&digest, &completions);
        }
        Ok(JudgeResponse {
            completions,
            backend_id: self.backend.id().to_string(),
            cached: false,
        })
    }

    /// Fan out over worker threads; results come back in input order.
    pub fn complete_all(
        &self,
        requests: &[JudgeRequest],
    ) -> Vec<Result<JudgeResponse, JudgeError>> {
        let workers = self.gate.limit().min(requests.len());
        if workers <= 1 {
            return requests.iter().map(|r| self.complete(r)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<JudgeResponse, JudgeError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= requests.len() {
                        break;
                    }
                    let result = self.complete(&requests[i]);
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| {
                s.into_inner()
                    .expect("slot lock")
                    .expect("every slot filled")
            })
            .collect()
    }
}
