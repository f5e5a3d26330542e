//! Client for models served behind an OpenAI-compatible completions endpoint.
//!
//! Endpoints that only sample (black-box) can act as base models but never as
//! guidance models: [`ScoringClient`] is the only remote [`ScoringModel`] and
//! cannot be built from an endpoint without scoring support.

mod cache;
pub mod mock;
mod transport;
pub mod wire;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cache::CachedTransport;
pub use transport::{HttpTransport, Transport};
pub use wire::{CompletionChoice, CompletionRequest, CompletionResponse, FinishReason};

use crate::error::{Error, Result};
use crate::guidance::ScoringModel;
use crate::sampling::SamplingParams;
use crate::search::{BaseModel, Chunk, Prompt, Response};
use crate::tokens::{TokenId, TokenSeq, Vocab};

fn default_timeout() -> f64 {
    30.0
}
fn default_in_flight() -> usize {
    8
}
fn default_attempts() -> u32 {
    4
}
fn default_backoff() -> u64 {
    250
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer credential.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub supports_scoring: bool,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// First retry delay; doubles on every further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            supports_scoring: false,
            max_attempts: default_attempts(),
            backoff_ms: default_backoff(),
        }
    }

    pub fn scoring(mut self, supports: bool) -> Self {
        self.supports_scoring = supports;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(Error::Config("timeout must be > 0".into()));
        }
        reqwest::Url::parse(&self.base_url).map_err(|e| Error::Config(format!("bad base_url {:?}: {e}", self.base_url)))?;
        Ok(())
    }
}

/// An endpoint plus the transport used to reach it.
#[derive(Clone)]
pub struct RemoteEndpoint {
    config: EndpointConfig,
    transport: Arc<dyn Transport>,
}

impl std::fmt::Debug for RemoteEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEndpoint").field("config", &self.config).finish()
    }
}

impl RemoteEndpoint {
    pub fn connect(config: EndpointConfig) -> Result<Self> {
        let transport = HttpTransport::new(&config)?;
        Ok(Self { config, transport: Arc::new(transport) })
    }

    pub fn with_transport(config: EndpointConfig, transport: Arc<dyn Transport>) -> Self {
        Self { config, transport }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// Issues one request for `n` continuations of at most `chunk_len` server tokens.
    pub fn sample_chunk_remote(&self, prefix_text: &str, chunk_len: usize, params: &SamplingParams, n: usize) -> Result<Vec<CompletionChoice>> {
        if chunk_len == 0 {
            return Err(Error::InvalidParameter("chunk length must be >= 1".into()));
        }
        let request = CompletionRequest {
            model: self.config.model_name.clone(),
            prompt: prefix_text.to_string(),
            max_tokens: chunk_len,
            temperature: params.temperature,
            top_p: params.top_p,
            n,
            seed: Some(params.seed),
            echo: false,
            logprobs: None,
            stop: None,
        };
        let resp = self.transport.complete(&request)?;
        if resp.choices.len() != n {
            return Err(Error::Protocol(format!("asked for {n} choices, got {}", resp.choices.len())));
        }
        resp.choices.into_iter().map(CompletionChoice::try_from).collect()
    }

    /// Natural-log probability of `full_text[prompt_text..]` given `prompt_text`:
    /// the sum of echoed token log-probabilities whose character offset is at
    /// or after the prompt's length.
    pub fn score_remote(&self, prompt_text: &str, full_text: &str) -> Result<f64> {
        if !self.config.supports_scoring {
            return Err(Error::ScoringUnsupported);
        }
        if !full_text.starts_with(prompt_text) {
            return Err(Error::InvalidParameter("prompt text is not a prefix of the full text".into()));
        }
        if full_text.len() == prompt_text.len() {
            return Ok(0.0);
        }
        let request = CompletionRequest {
            model: self.config.model_name.clone(),
            prompt: full_text.to_string(),
            max_tokens: 0,
            temperature: 1.0,
            top_p: 1.0,
            n: 1,
            seed: None,
            echo: true,
            logprobs: Some(1),
            stop: None,
        };
        let resp = self.transport.complete(&request)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Protocol("no choices in scoring response".into()))?;
        let choice = CompletionChoice::try_from(choice)?;
        let (Some(lps), Some(offsets)) = (choice.token_logprobs, choice.text_offsets) else {
            return Err(Error::Protocol("scoring response carries no logprobs".into()));
        };
        let boundary = prompt_text.chars().count();
        let mut total = 0.0;
        for (lp, off) in lps.iter().zip(&offsets) {
            if *off >= boundary {
                total += lp.ok_or_else(|| Error::Protocol(format!("missing logprob at offset {off}")))?;
            }
        }
        Ok(total)
    }
}

/// Wraps the endpoint's transport with an on-disk cache under `dir`.
pub fn cached(endpoint: RemoteEndpoint, dir: impl Into<PathBuf>) -> RemoteEndpoint {
    struct Shared(Arc<dyn Transport>);
    impl Transport for Shared {
        fn complete(&self, r: &CompletionRequest) -> Result<CompletionResponse> {
            self.0.complete(r)
        }
    }
    let name = endpoint.config.model_name.clone();
    let transport = CachedTransport::new(Shared(endpoint.transport), dir, name);
    RemoteEndpoint { config: endpoint.config, transport: Arc::new(transport) }
}

impl BaseModel for RemoteEndpoint {
    fn vocab(&self) -> Option<&Vocab> {
        None
    }

    /// One `n = 1` request per chunk, seeded with the slot seed. The token
    /// count is taken from the protocol: a `length` finish means exactly
    /// `max_len` tokens; a `stop` finish ends the response and is counted as
    /// `max_len` for budget purposes.
    fn sample_chunk(&self, prompt: &Prompt, prefix: &Response, max_len: usize, sampling: &SamplingParams, seed: u64) -> Result<Chunk> {
        let text = format!("{}{}", prompt.text, prefix.text);
        let choice = self
            .sample_chunk_remote(&text, max_len, &sampling.with_seed(seed), 1)?
            .pop()
            .ok_or_else(|| Error::Protocol("empty choice list".into()))?;
        Ok(Chunk {
            tokens: TokenSeq::new(),
            text: choice.text,
            len: max_len,
            ended: choice.finish_reason == FinishReason::Stop,
        })
    }

    fn parallel_requests(&self) -> bool {
        true
    }
}

/// A remote guidance model. Construction fails for sampling-only endpoints.
#[derive(Debug, Clone)]
pub struct ScoringClient(RemoteEndpoint);

impl ScoringClient {
    pub fn new(endpoint: RemoteEndpoint) -> Result<Self> {
        if !endpoint.config.supports_scoring {
            return Err(Error::ScoringUnsupported);
        }
        Ok(Self(endpoint))
    }

    pub fn endpoint(&self) -> &RemoteEndpoint {
        &self.0
    }
}

impl ScoringModel for ScoringClient {
    fn vocab(&self) -> Option<&Vocab> {
        None
    }

    fn continuation_logprobs(&self, _: &[TokenId], _: &[TokenId], _: &[TokenId]) -> Result<Vec<f64>> {
        Err(Error::ScoringUnsupported)
    }

    fn next_token_logprobs(&self, _: &[TokenId], _: &[TokenId]) -> Result<Vec<f64>> {
        Err(Error::ScoringUnsupported)
    }

    fn text_logprob(&self, prompt_text: &str, full_text: &str) -> Result<f64> {
        self.0.score_remote(prompt_text, full_text)
    }
}
