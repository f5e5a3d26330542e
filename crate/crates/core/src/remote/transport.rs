use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::{info, warn};

use super::wire::{CompletionRequest, CompletionResponse};
use super::EndpointConfig;
use crate::error::{Error, Result};

/// Something that can answer a completion request.
pub trait Transport: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse>;
}

/// Counting gate bounding concurrent requests.
pub(crate) struct InFlightGate {
    limit: usize,
    current: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

pub(crate) struct Permit<'a>(&'a InFlightGate);

impl InFlightGate {
    pub(crate) fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), current: Mutex::new(0), freed: Condvar::new(), peak: AtomicUsize::new(0) }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::SeqCst);
        Permit(self)
    }

    pub(crate) fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Blocking HTTP transport with an in-flight limit and retries on timeouts,
/// 429 and 5xx. Retried bodies are byte-identical.
pub struct HttpTransport {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
    max_attempts: u32,
    backoff: Duration,
    attempts: AtomicU64,
}

enum Attempt {
    Done(CompletionResponse),
    Retry(Error),
}

impl HttpTransport {
    pub fn new(config: &EndpointConfig) -> Result<Self> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let api_key = config.api_key_env.as_deref().and_then(|var| std::env::var(var).ok());
        Ok(Self {
            url: format!("{}/v1/completions", config.base_url.trim_end_matches('/')),
            api_key,
            client,
            gate: InFlightGate::new(config.max_in_flight),
            max_attempts: config.max_attempts.max(1),
            backoff: Duration::from_millis(config.backoff_ms),
            attempts: AtomicU64::new(0),
        })
    }

    /// Total HTTP attempts issued, retries included.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously outstanding requests observed.
    pub fn peak_in_flight(&self) -> usize {
        self.gate.peak()
    }

    fn attempt(&self, body: &[u8]) -> Result<Attempt> {
        let _permit = self.gate.acquire();
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let mut req = self
            .client
            .post(&self.url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.api_key {
            req = req.header(reqwest::header::AUTHORIZATION, format!("Bearer {key}"));
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Ok(Attempt::Retry(Error::Timeout)),
            Err(e) => return Err(Error::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let bytes = match resp.bytes() {
            Ok(b) => b,
            Err(e) if e.is_timeout() => return Ok(Attempt::Retry(Error::Timeout)),
            Err(e) => return Err(Error::Transport(e.to_string())),
        };
        match status {
            200..=299 => Ok(Attempt::Done(serde_json::from_slice(&bytes)?)),
            429 => Ok(Attempt::Retry(Error::RateLimited { attempts: 0 })),
            500..=599 => Ok(Attempt::Retry(Error::HttpStatus(status))),
            _ => Err(Error::HttpStatus(status)),
        }
    }
}

impl Transport for HttpTransport {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        request.validate()?;
        let body = serde_json::to_vec(request)?;
        let mut last = Error::Timeout;
        for attempt in 1..=self.max_attempts {
            match self.attempt(&body)? {
                Attempt::Done(resp) => {
                    if attempt > 1 {
                        info!("completion succeeded after {attempt} attempts");
                    }
                    return Ok(resp);
                }
                Attempt::Retry(err) => {
                    warn!("attempt {attempt}/{} failed: {err}", self.max_attempts);
                    last = match err {
                        Error::RateLimited { .. } => Error::RateLimited { attempts: attempt },
                        e => e,
                    };
                    if attempt < self.max_attempts {
                        std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
                    }
                }
            }
        }
        Err(last)
    }
}
