//! An in-process mock of the completions endpoint for conformance tests.
//!
//! The mock tokenizes one character per token. Scoring requests echo the
//! prompt with a log-probability per character from a configurable function of
//! `(preceding text, char)`; the first token has none, as with real servers.
//! Sampling requests return either a fixed text or deterministic pseudo-text
//! derived from `(prompt, seed, choice index)`.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::json;

use super::wire::CompletionRequest;
use crate::sampling::mix_seed;

pub type LogprobFn = Arc<dyn Fn(&str, char) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct MockConfig {
    /// Fixed continuation text; `None` generates pseudo-text.
    pub sample_text: Option<String>,
    pub logprob: LogprobFn,
    /// Status codes returned (in order) before normal service starts.
    pub faults: Vec<u16>,
    /// Artificial latency per request.
    pub delay: Duration,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self { sample_text: None, logprob: Arc::new(default_logprob), faults: Vec::new(), delay: Duration::ZERO }
    }
}

/// Deterministic per-character log-probability in `[-2.1, -0.1)`.
pub fn default_logprob(context: &str, ch: char) -> f64 {
    let h = context.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let h = (h ^ ch as u64).wrapping_mul(0x100_0000_01b3);
    -(0.1 + (h % 1000) as f64 / 500.0)
}

#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub body: String,
    pub authorization: Option<String>,
    pub path: String,
}

struct State {
    config: MockConfig,
    faults: Mutex<VecDeque<u16>>,
    requests: Mutex<Vec<RecordedRequest>>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

pub struct MockServer {
    url: String,
    state: Arc<State>,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(config: MockConfig) -> std::io::Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let port = server.server_addr().to_ip().map(|a| a.port()).ok_or_else(|| std::io::Error::other("no ip address"))?;
        let server = Arc::new(server);
        let state = Arc::new(State {
            faults: Mutex::new(config.faults.iter().copied().collect()),
            config,
            requests: Mutex::new(Vec::new()),
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let handle = {
            let server = Arc::clone(&server);
            let state = Arc::clone(&state);
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    let state = Arc::clone(&state);
                    std::thread::spawn(move || handle(&state, request));
                }
            })
        };
        Ok(Self { url: format!("http://127.0.0.1:{port}"), state, server, handle: Some(handle) })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn calls(&self) -> usize {
        self.state.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.requests.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Highest number of requests the mock was serving at once.
    pub fn peak_in_flight(&self) -> usize {
        self.state.peak.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle(state: &State, mut request: tiny_http::Request) {
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.peak.fetch_max(now, Ordering::SeqCst);
    state.calls.fetch_add(1, Ordering::SeqCst);

    let mut body = String::new();
    let _ = request.as_reader().read_to_string(&mut body);
    let authorization = request
        .headers()
        .iter()
        .find(|h| h.field.equiv("Authorization"))
        .map(|h| h.value.as_str().to_string());
    state.requests.lock().unwrap_or_else(|e| e.into_inner()).push(RecordedRequest {
        body: body.clone(),
        authorization,
        path: request.url().to_string(),
    });

    if !state.config.delay.is_zero() {
        std::thread::sleep(state.config.delay);
    }

    let fault = state.faults.lock().unwrap_or_else(|e| e.into_inner()).pop_front();
    let (status, payload) = match fault {
        Some(code) => (code, json!({"error": {"message": "injected fault", "code": code}})),
        None => match serde_json::from_str::<CompletionRequest>(&body) {
            Ok(req) => (200, respond(&state.config, &req)),
            Err(e) => (400, json!({"error": {"message": e.to_string()}})),
        },
    };
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    let response = tiny_http::Response::from_string(payload.to_string()).with_status_code(status).with_header(header);
    let _ = request.respond(response);
}

fn respond(config: &MockConfig, req: &CompletionRequest) -> serde_json::Value {
    if req.echo && req.logprobs.is_some() {
        let chars: Vec<char> = req.prompt.chars().collect();
        let mut context = String::new();
        let mut lps = Vec::with_capacity(chars.len());
        let mut tokens = Vec::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            lps.push(if i == 0 { None } else { Some((config.logprob)(&context, c)) });
            tokens.push(c.to_string());
            context.push(c);
        }
        let offsets: Vec<usize> = (0..chars.len()).collect();
        return json!({
            "object": "text_completion",
            "choices": [{
                "text": req.prompt,
                "index": 0,
                "logprobs": {"tokens": tokens, "token_logprobs": lps, "text_offset": offsets},
                "finish_reason": "length",
            }]
        });
    }
    let choices: Vec<serde_json::Value> = (0..req.n)
        .map(|i| {
            let (text, finish) = match &config.sample_text {
                Some(t) => {
                    let n = t.chars().count();
                    if n > req.max_tokens {
                        (t.chars().take(req.max_tokens).collect::<String>(), "length")
                    } else {
                        (t.clone(), if n == req.max_tokens { "length" } else { "stop" })
                    }
                }
                None => pseudo_text(&req.prompt, req.seed.unwrap_or(0), i, req.max_tokens),
            };
            json!({"text": text, "index": i, "logprobs": null, "finish_reason": finish})
        })
        .collect();
    json!({"object": "text_completion", "choices": choices})
}

fn pseudo_text(prompt: &str, seed: u64, index: usize, max_tokens: usize) -> (String, &'static str) {
    const ALPHABET: [char; 4] = ['x', 'y', 'z', ' '];
    let p = prompt.bytes().fold(0u64, |h, b| mix_seed(&[h, b as u64]));
    let mut out = String::new();
    for pos in 0..max_tokens {
        let h = mix_seed(&[p, seed, index as u64, pos as u64]);
        if h.is_multiple_of(8) {
            return (out, "stop");
        }
        out.push(ALPHABET[(h >> 8) as usize % ALPHABET.len()]);
    }
    (out, "length")
}
