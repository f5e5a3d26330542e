//! Decoding strategies over an abstract base model and a guidance pair:
//! chunk-level beam search, best-of-N, token-level beam search, EFT decoding
//! and plain sampling.
//!
//! Randomness for every sampled chunk comes from
//! [`slot_seed`]`(run_seed, round, parent_slot, sample_index)`, so methods with
//! the same budget draw from the same streams: `cbs(W=1, K=N, L=∞)` and
//! `best_of_n(N)` produce the same candidates and the same winner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{eft_compose, GuidancePair, GuidanceScore};
use crate::sampling::{apply_sampling_filters, draw, rng_from_seed, slot_seed, LogitVector, SamplingParams};
use crate::tabular::LanguageModel;
use crate::tokens::{TokenId, TokenSeq, Vocab};

// ── Prompts, responses, chunks ────────────────────────────────────────────

/// A prompt as text, plus its token ids when the base model is in-process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub tokens: Option<TokenSeq>,
}

impl Prompt {
    pub fn from_tokens(vocab: &Vocab, tokens: impl Into<TokenSeq>) -> Result<Self> {
        let tokens = tokens.into();
        vocab.check(&tokens)?;
        if vocab.is_complete(&tokens) {
            return Err(Error::InvalidSequence("prompt may not end in EOS".into()));
        }
        Ok(Self { text: vocab.decode(&tokens), tokens: Some(tokens) })
    }

    pub fn encode(vocab: &Vocab, text: &str) -> Result<Self> {
        Ok(Self { text: text.to_string(), tokens: Some(vocab.encode(text)?) })
    }

    /// Text-only prompt for remote base models.
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), tokens: None }
    }

    fn require_tokens(&self) -> Result<&[TokenId]> {
        self.tokens
            .as_deref()
            .ok_or_else(|| Error::InvalidParameter("in-process model needs a tokenized prompt".into()))
    }
}

/// A partial or complete response.
///
/// `tokens` is empty for text-only bases; `len` counts base-model tokens
/// (server-reported for remote bases).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub tokens: TokenSeq,
    pub text: String,
    pub len: usize,
    /// Ended by EOS (or a stop finish reason), as opposed to hitting `max_tokens`.
    pub ended: bool,
}

impl Response {
    pub fn append(&self, chunk: &Chunk) -> Response {
        Response {
            tokens: self.tokens.concat(&chunk.tokens),
            text: format!("{}{}", self.text, chunk.text),
            len: self.len + chunk.len,
            ended: chunk.ended,
        }
    }

    pub fn is_complete(&self, max_tokens: usize) -> bool {
        self.ended || self.len >= max_tokens
    }

    pub fn is_truncated(&self, max_tokens: usize) -> bool {
        !self.ended && self.len >= max_tokens
    }
}

/// One continuation sampled from a base model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Chunk {
    pub tokens: TokenSeq,
    pub text: String,
    pub len: usize,
    pub ended: bool,
}

/// A frozen model to steer. Only sampling is required; per-step
/// log-probabilities are needed for exhaustive expansion and EFT.
pub trait BaseModel: Send + Sync {
    fn vocab(&self) -> Option<&Vocab>;

    /// Samples up to `max_len` tokens after `prompt ∘ prefix` from the stream
    /// seeded by `seed`, stopping early at EOS.
    fn sample_chunk(&self, prompt: &Prompt, prefix: &Response, max_len: usize, sampling: &SamplingParams, seed: u64) -> Result<Chunk>;

    fn next_token_logprobs(&self, _prompt: &Prompt, _prefix: &Response) -> Result<Vec<f64>> {
        Err(Error::ScoringUnsupported)
    }

    /// Whether chunk requests of a round should be issued concurrently.
    fn parallel_requests(&self) -> bool {
        false
    }
}

impl<T: LanguageModel> BaseModel for T {
    fn vocab(&self) -> Option<&Vocab> {
        Some(LanguageModel::vocab(self))
    }

    fn sample_chunk(&self, prompt: &Prompt, prefix: &Response, max_len: usize, sampling: &SamplingParams, seed: u64) -> Result<Chunk> {
        let prompt_tokens = prompt.require_tokens()?;
        let vocab = LanguageModel::vocab(self);
        let eos = vocab.eos_id();
        let mut rng = rng_from_seed(seed);
        let mut ctx = prefix.tokens.0.clone();
        let mut out = Vec::new();
        while out.len() < max_len {
            let lp = LanguageModel::next_token_logprobs(self, prompt_tokens, &ctx)?;
            let dist = apply_sampling_filters(&LogitVector::new(lp)?, sampling);
            let tok = draw(&dist, &mut rng) as TokenId;
            ctx.push(tok);
            out.push(tok);
            if tok == eos {
                break;
            }
        }
        let ended = out.last() == Some(&eos);
        Ok(Chunk { text: vocab.decode(&out), len: out.len(), ended, tokens: TokenSeq(out) })
    }

    fn next_token_logprobs(&self, prompt: &Prompt, prefix: &Response) -> Result<Vec<f64>> {
        LanguageModel::next_token_logprobs(self, prompt.require_tokens()?, &prefix.tokens)
    }
}

// ── Configuration ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkLength {
    Tokens(usize),
    Infinite,
}

impl ChunkLength {
    fn cap(self, remaining: usize) -> usize {
        match self {
            ChunkLength::Tokens(l) => l.min(remaining),
            ChunkLength::Infinite => remaining,
        }
    }
}

impl Serialize for ChunkLength {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ChunkLength::Tokens(l) => s.serialize_u64(*l as u64),
            ChunkLength::Infinite => s.serialize_str("infinite"),
        }
    }
}

impl<'de> Deserialize<'de> for ChunkLength {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(ChunkLength::Tokens(n as usize)),
            Raw::S(s) if s == "infinite" || s == "inf" => Ok(ChunkLength::Infinite),
            Raw::S(s) => Err(serde::de::Error::custom(format!("chunk length must be an integer or \"infinite\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub beam_width: usize,
    pub successors: usize,
    pub chunk_length: ChunkLength,
    pub max_tokens: usize,
    #[serde(default)]
    pub sampling: SamplingParams,
    /// Expand every next token in the filtered base support instead of
    /// sampling K chunks. Requires `chunk_length = 1` and an in-process base.
    #[serde(default)]
    pub exhaustive: bool,
    /// Hard cap on sampled tokens; defaults to `W·K·max_tokens·4`.
    #[serde(default)]
    pub token_budget: Option<usize>,
}

/// Chunk length used for stateless remote base models.
pub const REMOTE_CHUNK_LENGTH: usize = 100;

impl SearchConfig {
    pub fn new(beam_width: usize, successors: usize, chunk_length: ChunkLength, max_tokens: usize) -> Self {
        Self {
            beam_width,
            successors,
            chunk_length,
            max_tokens,
            sampling: SamplingParams::default(),
            exhaustive: false,
            token_budget: None,
        }
    }

    /// `W, K, L = 4, 4, 5`.
    pub fn synthetic(max_tokens: usize) -> Self {
        Self::new(4, 4, ChunkLength::Tokens(5), max_tokens)
    }

    /// Long chunks for black-box endpoints.
    pub fn remote(beam_width: usize, successors: usize, max_tokens: usize) -> Self {
        Self::new(beam_width, successors, ChunkLength::Tokens(REMOTE_CHUNK_LENGTH), max_tokens)
    }

    /// Token-level beam search expressed as CBS.
    pub fn exhaustive(beam_width: usize, max_tokens: usize) -> Self {
        Self { exhaustive: true, ..Self::new(beam_width, 1, ChunkLength::Tokens(1), max_tokens) }
    }

    pub fn with_sampling(mut self, sampling: SamplingParams) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn budget_cap(&self) -> usize {
        self.token_budget.unwrap_or(self.beam_width * self.successors * self.max_tokens * 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.successors == 0 || self.max_tokens == 0 {
            return Err(Error::InvalidParameter("W, K and max_tokens must be >= 1".into()));
        }
        if self.chunk_length == ChunkLength::Tokens(0) {
            return Err(Error::InvalidParameter("chunk length must be >= 1".into()));
        }
        if self.exhaustive && self.chunk_length != ChunkLength::Tokens(1) {
            return Err(Error::InvalidParameter("exhaustive expansion requires chunk length 1".into()));
        }
        self.sampling.validate()
    }
}

// ── Hypotheses and traces ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub response: Response,
    pub score: GuidanceScore,
    pub complete: bool,
    pub truncated: bool,
    /// Seed of the stream that produced the last chunk (0 for the root).
    pub slot_seed: u64,
}

impl Hypothesis {
    fn root() -> Self {
        Self { response: Response::default(), score: GuidanceScore(0.0), complete: false, truncated: false, slot_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub parent: usize,
    pub index: usize,
    pub text: String,
    pub tokens: TokenSeq,
    pub score: f64,
    /// A complete parent passed through unchanged.
    pub carried: bool,
    pub complete: bool,
    pub truncated: bool,
    pub survived: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub candidates: Vec<CandidateTrace>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub rounds: Vec<RoundTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: Hypothesis,
    pub trace: SearchTrace,
    pub rounds: usize,
    pub sampled_tokens: usize,
    pub chunk_requests: usize,
}

// ── Scoring dispatch ──────────────────────────────────────────────────────

/// Incremental token scoring when base and pair share a vocabulary,
/// full text re-scoring otherwise.
enum Scorer<'a> {
    Tokens { pair: &'a GuidancePair, prompt: &'a [TokenId] },
    Text { pair: &'a GuidancePair, prompt: &'a str },
}

impl<'a> Scorer<'a> {
    fn new<B: BaseModel + ?Sized>(base: &B, pair: &'a GuidancePair, prompt: &'a Prompt) -> Self {
        match (base.vocab(), pair.vocab(), prompt.tokens.as_deref()) {
            (Some(b), Some(p), Some(tokens)) if b == p => Scorer::Tokens { pair, prompt: tokens },
            _ => Scorer::Text { pair, prompt: &prompt.text },
        }
    }

    fn score(&self, parent: &Hypothesis, chunk: &Chunk, response: &Response) -> Result<GuidanceScore> {
        match self {
            Scorer::Tokens { pair, prompt } => pair.extend_score(prompt, &parent.response.tokens, parent.score, &chunk.tokens),
            Scorer::Text { pair, prompt } => pair.score_text(prompt, &response.text, response.ended),
        }
    }
}

fn collect_ordered<T: Send, F>(parallel: bool, jobs: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if parallel {
        (0..jobs).into_par_iter().map(f).collect()
    } else {
        (0..jobs).map(f).collect()
    }
}

// ── Chunk-level beam search ──────────────────────────────────────────────

struct Candidate {
    parent: usize,
    index: usize,
    hyp: Hypothesis,
    carried: bool,
}

/// Chunk-level beam search.
///
/// Keeps `W` hypotheses; every incomplete one spawns `K` sampled chunks of at
/// most `L` tokens, every complete one passes through once. All successors are
/// scored under the guidance pair and the top `W` survive, ties going to the
/// earlier parent slot and then the earlier chunk. Exhaustive mode starts from
/// a single root and expands every supported next token instead of sampling.
pub fn cbs<B: BaseModel + ?Sized>(base: &B, pair: &GuidancePair, prompt: &Prompt, config: &SearchConfig) -> Result<SearchOutcome> {
    config.validate()?;
    let scorer = Scorer::new(base, pair, prompt);
    let run_seed = config.sampling.seed;
    let max_tokens = config.max_tokens;
    let cap = config.budget_cap();

    let mut beam = if config.exhaustive { vec![Hypothesis::root()] } else { vec![Hypothesis::root(); config.beam_width] };
    let mut trace = SearchTrace::default();
    let mut sampled_tokens = 0usize;
    let mut chunk_requests = 0usize;
    let mut round = 0usize;

    while beam.iter().any(|h| !h.complete) {
        // (parent, index, chunk); complete parents carry through as chunk = None
        let mut jobs: Vec<(usize, usize, Option<u64>)> = Vec::new();
        let mut expansions: Vec<(usize, usize, Chunk)> = Vec::new();
        for (p, h) in beam.iter().enumerate() {
            if h.complete {
                jobs.push((p, 0, None));
            } else if config.exhaustive {
                let lp = base.next_token_logprobs(prompt, &h.response)?;
                let dist = apply_sampling_filters(&LogitVector::new(lp)?, &config.sampling);
                let vocab = base.vocab().ok_or(Error::ScoringUnsupported)?;
                for (i, tok) in dist.support().enumerate() {
                    let tokens = TokenSeq(vec![tok as TokenId]);
                    let chunk = Chunk {
                        text: vocab.decode(&tokens),
                        len: 1,
                        ended: tok as TokenId == vocab.eos_id(),
                        tokens,
                    };
                    expansions.push((p, i, chunk));
                }
            } else {
                for k in 0..config.successors {
                    jobs.push((p, k, Some(slot_seed(run_seed, round, p, k))));
                }
            }
        }

        let sampled: Vec<Option<Chunk>> = collect_ordered(base.parallel_requests(), jobs.len(), |j| {
            let (p, _, seed) = jobs[j];
            match seed {
                None => Ok(None),
                Some(seed) => {
                    let h = &beam[p];
                    let max_len = config.chunk_length.cap(max_tokens - h.response.len);
                    base.sample_chunk(prompt, &h.response, max_len, &config.sampling, seed).map(Some)
                }
            }
        })?;

        let mut candidates: Vec<Candidate> = Vec::with_capacity(jobs.len() + expansions.len());
        let mut fresh: Vec<(usize, usize, u64, Chunk)> = Vec::new();
        for ((p, k, seed), chunk) in jobs.iter().zip(sampled) {
            match chunk {
                None => candidates.push(Candidate { parent: *p, index: *k, hyp: beam[*p].clone(), carried: true }),
                Some(c) => {
                    sampled_tokens += c.len;
                    chunk_requests += 1;
                    fresh.push((*p, *k, seed.unwrap_or(0), c));
                }
            }
        }
        if sampled_tokens > cap {
            return Err(Error::BudgetExceeded { used: sampled_tokens, cap });
        }
        let seed_of = |p: usize| beam[p].slot_seed;
        fresh.extend(expansions.into_iter().map(|(p, i, c)| (p, i, seed_of(p), c)));

        let scored: Vec<Candidate> = collect_ordered(base.parallel_requests(), fresh.len(), |j| {
            let (p, k, seed, ref chunk) = fresh[j];
            let parent = &beam[p];
            let response = parent.response.append(chunk);
            let score = scorer.score(parent, chunk, &response)?;
            let complete = response.is_complete(max_tokens);
            let truncated = response.is_truncated(max_tokens);
            Ok(Candidate { parent: p, index: k, hyp: Hypothesis { response, score, complete, truncated, slot_seed: seed }, carried: false })
        })?;
        candidates.extend(scored);
        // restore (parent, index) order: carried parents were pushed first
        candidates.sort_by_key(|c| (c.parent, c.index));
        // stable: equal scores keep (parent, index) order
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| candidates[b].hyp.score.0.total_cmp(&candidates[a].hyp.score.0));
        let survivors: Vec<usize> = order.iter().take(config.beam_width).copied().collect();

        let mut survived = vec![false; candidates.len()];
        for &i in &survivors {
            survived[i] = true;
        }
        trace.rounds.push(RoundTrace {
            round,
            candidates: candidates
                .iter()
                .zip(&survived)
                .map(|(c, &s)| CandidateTrace {
                    parent: c.parent,
                    index: c.index,
                    text: c.hyp.response.text.clone(),
                    tokens: c.hyp.response.tokens.clone(),
                    score: c.hyp.score.0,
                    carried: c.carried,
                    complete: c.hyp.complete,
                    truncated: c.hyp.truncated,
                    survived: s,
                })
                .collect(),
        });
        beam = survivors.into_iter().map(|i| candidates[i].hyp.clone()).collect();
        round += 1;
    }

    let best = beam
        .iter()
        .enumerate()
        .fold(None::<(usize, &Hypothesis)>, |acc, (i, h)| match acc {
            Some((_, b)) if b.score.0 >= h.score.0 => acc,
            _ => Some((i, h)),
        })
        .map(|(_, h)| h.clone())
        .ok_or_else(|| Error::InvalidParameter("empty beam".into()))?;

    Ok(SearchOutcome { best, trace, rounds: round, sampled_tokens, chunk_requests })
}

// ── Best-of-N ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestOfN {
    pub best: Hypothesis,
    pub best_index: usize,
    pub candidates: Vec<Hypothesis>,
    pub sampled_tokens: usize,
}

/// Draws `n` complete responses and keeps the highest guidance score
/// (ties to the lower sample index). Sample `i` uses the stream
/// `slot_seed(seed, 0, 0, i)`.
pub fn best_of_n<B: BaseModel + ?Sized>(
    base: &B,
    pair: &GuidancePair,
    prompt: &Prompt,
    n: usize,
    sampling: &SamplingParams,
    max_tokens: usize,
) -> Result<BestOfN> {
    if n == 0 || max_tokens == 0 {
        return Err(Error::InvalidParameter("N and max_tokens must be >= 1".into()));
    }
    sampling.validate()?;
    let scorer = Scorer::new(base, pair, prompt);
    let root = Hypothesis::root();
    let candidates: Vec<Hypothesis> = collect_ordered(base.parallel_requests(), n, |i| {
        let seed = slot_seed(sampling.seed, 0, 0, i);
        let chunk = base.sample_chunk(prompt, &root.response, max_tokens, sampling, seed)?;
        let response = root.response.append(&chunk);
        let score = scorer.score(&root, &chunk, &response)?;
        Ok(Hypothesis {
            complete: response.is_complete(max_tokens),
            truncated: response.is_truncated(max_tokens),
            response,
            score,
            slot_seed: seed,
        })
    })?;
    let mut best_index = 0;
    for (i, h) in candidates.iter().enumerate() {
        if h.score.0 > candidates[best_index].score.0 {
            best_index = i;
        }
    }
    let sampled_tokens = candidates.iter().map(|h| h.response.len).sum();
    Ok(BestOfN { best: candidates[best_index].clone(), best_index, candidates, sampled_tokens })
}

// ── Token-level beam search ──────────────────────────────────────────────

/// Default cap on successors considered in one round of token-level beam search.
pub const DEFAULT_BRANCH_BUDGET: usize = 1 << 16;

/// Deterministic beam search over every next token in the filtered base
/// support, ranked by guidance score.
pub fn token_beam_search<M: LanguageModel + ?Sized>(
    base: &M,
    pair: &GuidancePair,
    prompt: &[TokenId],
    beam_width: usize,
    max_tokens: usize,
    sampling: &SamplingParams,
    branch_budget: usize,
) -> Result<Hypothesis> {
    if beam_width == 0 || max_tokens == 0 {
        return Err(Error::InvalidParameter("W and max_tokens must be >= 1".into()));
    }
    let vocab = base.vocab();
    if pair.vocab() != Some(vocab) {
        return Err(Error::VocabMismatch("token beam search needs a shared vocabulary".into()));
    }
    let eos = vocab.eos_id();
    let mut beam = vec![Hypothesis::root()];
    while beam.iter().any(|h| !h.complete) {
        let mut next: Vec<Hypothesis> = Vec::new();
        for h in &beam {
            if h.complete {
                next.push(h.clone());
                continue;
            }
            let logits = base.next_token_logits(prompt, &h.response.tokens)?;
            let dist = apply_sampling_filters(&logits, sampling);
            for tok in dist.support() {
                let tok = tok as TokenId;
                let score = pair.extend_score(prompt, &h.response.tokens, h.score, &[tok])?;
                let tokens = h.response.tokens.concat(&[tok]);
                let response = Response {
                    text: vocab.decode(&tokens),
                    len: tokens.len(),
                    ended: tok == eos,
                    tokens,
                };
                next.push(Hypothesis {
                    complete: response.is_complete(max_tokens),
                    truncated: response.is_truncated(max_tokens),
                    response,
                    score,
                    slot_seed: 0,
                });
            }
            if next.len() > branch_budget {
                return Err(Error::SupportTooLarge { size: next.len(), limit: branch_budget });
            }
        }
        next.sort_by(|a, b| b.score.0.total_cmp(&a.score.0));
        next.truncate(beam_width);
        beam = next;
    }
    Ok(beam.swap_remove(0))
}

// ── EFT and plain sampling ───────────────────────────────────────────────

/// Samples from `base + β⁻¹ (tuned − untuned)` token by token, with sampling
/// filters applied to the composed vector.
pub fn eft_decode<B: BaseModel + ?Sized>(
    base: &B,
    pair: &GuidancePair,
    prompt: &Prompt,
    beta: f64,
    sampling: &SamplingParams,
    max_tokens: usize,
) -> Result<Response> {
    sampling.validate()?;
    let vocab = base.vocab().ok_or(Error::ScoringUnsupported)?;
    if pair.vocab() != Some(vocab) {
        return Err(Error::VocabMismatch("EFT requires base and guidance models to share a vocabulary".into()));
    }
    let prompt_tokens = prompt.require_tokens()?;
    let eos = vocab.eos_id();
    let mut rng = rng_from_seed(sampling.seed);
    let mut response = Response::default();
    while !response.is_complete(max_tokens) {
        let lb = base.next_token_logprobs(prompt, &response)?;
        let lt = pair.tuned().next_token_logprobs(prompt_tokens, &response.tokens)?;
        let lu = pair.untuned().next_token_logprobs(prompt_tokens, &response.tokens)?;
        let composed = eft_compose(&lb, &lt, &lu, beta)?;
        let tok = draw(&apply_sampling_filters(&composed, sampling), &mut rng) as TokenId;
        response.tokens.push(tok);
        response.len += 1;
        response.ended = tok == eos;
        response.text = vocab.decode(&response.tokens);
    }
    Ok(response)
}

/// Plain autoregressive sampling from the stream seeded by `sampling.seed`.
pub fn sample_base<B: BaseModel + ?Sized>(base: &B, prompt: &Prompt, sampling: &SamplingParams, max_tokens: usize) -> Result<Response> {
    sampling.validate()?;
    let root = Response::default();
    let chunk = base.sample_chunk(prompt, &root, max_tokens, sampling, sampling.seed)?;
    Ok(root.append(&chunk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::guidance_score;
    use crate::tabular::TabularLM;

    fn vocab() -> Vocab {
        Vocab::with_eos(["a", "b"]).unwrap()
    }

    fn model(bias: f64) -> TabularLM {
        TabularLM::new(vocab(), 1, 4)
            .unwrap()
            .with_row(&[], vec![bias, 0.1, -0.5])
            .unwrap()
            .with_row(&[0], vec![0.2, bias, 0.0])
            .unwrap()
            .with_row(&[1], vec![-bias, 0.4, 0.3 * bias])
            .unwrap()
    }

    fn pair() -> GuidancePair {
        GuidancePair::from_models(model(1.0), model(-0.5)).unwrap()
    }

    fn prompt() -> Prompt {
        Prompt::from_tokens(&vocab(), vec![]).unwrap()
    }

    #[test]
    fn point_mass_base_is_deterministic() {
        let base = TabularLM::new(vocab(), 0, 5).unwrap().with_default(vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        for seed in 0..5 {
            let r = sample_base(&base, &prompt(), &SamplingParams::default().with_seed(seed), 10).unwrap();
            assert_eq!(r.tokens.0, vec![0, 0, 0, 0, 2]);
            assert!(r.ended);
        }
    }

    #[test]
    fn max_tokens_truncates() {
        let base = model(0.0);
        let cfg = SearchConfig::new(2, 2, ChunkLength::Tokens(1), 2);
        let out = cbs(&base, &pair(), &prompt(), &cfg).unwrap();
        assert!(out.best.response.len <= 2);
        assert!(out.rounds <= 2);
    }

    #[test]
    fn cbs_respects_budget_accounting() {
        let base = model(0.0);
        let cfg = SearchConfig::new(3, 2, ChunkLength::Tokens(1), 4);
        let out = cbs(&base, &pair(), &prompt(), &cfg).unwrap();
        assert!(out.rounds <= 4);
        for r in &out.trace.rounds {
            assert!(r.candidates.iter().filter(|c| !c.carried).count() <= 3 * 2);
            assert_eq!(r.candidates.iter().filter(|c| c.survived).count(), 3.min(r.candidates.len()));
        }
    }

    #[test]
    fn trace_scores_replay() {
        let base = model(0.3);
        let p = pair();
        let cfg = SearchConfig::new(2, 3, ChunkLength::Tokens(2), 4);
        let out = cbs(&base, &p, &prompt(), &cfg).unwrap();
        for r in &out.trace.rounds {
            for c in &r.candidates {
                let fresh = guidance_score(&p, &[], &c.tokens).unwrap();
                assert!((fresh.0 - c.score).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tiny_budget_is_exceeded() {
        let base = model(0.0);
        let mut cfg = SearchConfig::new(2, 2, ChunkLength::Tokens(2), 4);
        cfg.token_budget = Some(1);
        assert!(matches!(cbs(&base, &pair(), &prompt(), &cfg), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::new(0, 1, ChunkLength::Tokens(1), 3).validate().is_err());
        assert!(SearchConfig::new(1, 1, ChunkLength::Tokens(0), 3).validate().is_err());
        let mut c = SearchConfig::new(1, 1, ChunkLength::Tokens(2), 3);
        c.exhaustive = true;
        assert!(c.validate().is_err());
        let s = SearchConfig::synthetic(16);
        assert_eq!((s.beam_width, s.successors, s.chunk_length), (4, 4, ChunkLength::Tokens(5)));
        assert_eq!(SearchConfig::remote(2, 2, 300).chunk_length, ChunkLength::Tokens(100));
    }

    #[test]
    fn greedy_token_beam_follows_hand_computed_path() {
        // W = 1: pick the best per-token log-ratio at each step.
        let p = pair();
        let base = model(0.0);
        let h = token_beam_search(&base, &p, &[], 1, 4, &SamplingParams::default(), DEFAULT_BRANCH_BUDGET).unwrap();
        // hand enumeration of per-token log-ratios
        let (t, u) = (model(1.0), model(-0.5));
        let mut prefix: Vec<TokenId> = vec![];
        loop {
            let lt = LanguageModel::next_token_logprobs(&t, &[], &prefix).unwrap();
            let lu = LanguageModel::next_token_logprobs(&u, &[], &prefix).unwrap();
            let live: Vec<usize> = (0..3).filter(|&i| lt[i].is_finite()).collect();
            let best = live.iter().copied().fold(live[0], |b, i| if lt[i] - lu[i] > lt[b] - lu[b] { i } else { b });
            prefix.push(best as TokenId);
            if best == 2 || prefix.len() == 4 {
                break;
            }
        }
        assert_eq!(h.response.tokens.0, prefix);
    }

    #[test]
    fn eft_rejects_vocab_mismatch() {
        let other = TabularLM::uniform(Vocab::with_eos(["x", "y"]).unwrap(), 4).unwrap();
        let pr = Prompt::from_tokens(&Vocab::with_eos(["x", "y"]).unwrap(), vec![]).unwrap();
        assert!(matches!(
            eft_decode(&other, &pair(), &pr, 1.0, &SamplingParams::default(), 4),
            Err(Error::VocabMismatch(_))
        ));
    }

    #[test]
    fn chunk_length_serde() {
        assert_eq!(serde_json::to_string(&ChunkLength::Infinite).unwrap(), "\"infinite\"");
        assert_eq!(serde_json::from_str::<ChunkLength>("5").unwrap(), ChunkLength::Tokens(5));
    }
}
