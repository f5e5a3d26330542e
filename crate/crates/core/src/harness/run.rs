use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Method, ModelSource, TaskSpec};
use super::fixtures::builtin_model;
use crate::error::{Error, Result};
use crate::guidance::{guidance_score, GuidancePair, ScoringModel};
use crate::remote::{cached, RemoteEndpoint, ScoringClient};
use crate::sampling::{mix_seed, SamplingParams};
use crate::search::{best_of_n, cbs, eft_decode, sample_base, token_beam_search, BaseModel, Prompt, Response, SearchConfig, DEFAULT_BRANCH_BUDGET};
use crate::soft::TerminalReward;
use crate::tabular::TabularLM;
use crate::tokens::{TokenSeq, Vocab};

/// Where to find relative paths, where to cache remote calls, and how many
/// prompts to run at once (0 = one per core).
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub base_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub parallelism: usize,
}

/// One prompt's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub index: usize,
    pub prompt: String,
    #[serde(default)]
    pub prompt_tokens: Option<TokenSeq>,
    pub method: Method,
    pub seed: u64,
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub response_tokens: TokenSeq,
    #[serde(default)]
    pub ended: bool,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default)]
    pub guidance_score: Option<f64>,
    #[serde(default)]
    pub gold_reward: Option<f64>,
    #[serde(default)]
    pub sampled_tokens: usize,
    #[serde(default)]
    pub rounds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Models, prompts and reward resolved from a [`TaskSpec`].
pub struct Resources {
    pub base: Arc<dyn BaseModel>,
    /// The base as an in-process table, when it is one.
    pub base_lm: Option<Arc<TabularLM>>,
    pub pair: Option<GuidancePair>,
    pub gold: Option<TerminalReward>,
    pub prompts: Vec<Prompt>,
}

fn load_tabular(source: &ModelSource, ctx: &RunContext) -> Result<Option<TabularLM>> {
    match source {
        ModelSource::Builtin(name) => builtin_model(name).map(Some),
        ModelSource::Fixture(path) => TabularLM::load(ctx.base_dir.join(path)).map(Some),
        ModelSource::Endpoint(_) => Ok(None),
    }
}

fn connect(source: &ModelSource, ctx: &RunContext) -> Result<Option<RemoteEndpoint>> {
    let ModelSource::Endpoint(config) = source else { return Ok(None) };
    let ep = RemoteEndpoint::connect(config.clone())?;
    Ok(Some(match &ctx.cache_dir {
        Some(dir) => cached(ep, dir),
        None => ep,
    }))
}

fn scoring_model(source: &ModelSource, ctx: &RunContext) -> Result<Arc<dyn ScoringModel>> {
    if let Some(lm) = load_tabular(source, ctx)? {
        return Ok(Arc::new(lm));
    }
    let ep = connect(source, ctx)?.ok_or_else(|| Error::Config("unresolvable guidance model".into()))?;
    Ok(Arc::new(ScoringClient::new(ep)?))
}

impl Resources {
    pub fn resolve(spec: &TaskSpec, ctx: &RunContext) -> Result<Self> {
        spec.validate()?;
        let base_lm = load_tabular(&spec.base, ctx)?.map(Arc::new);
        let base: Arc<dyn BaseModel> = match &base_lm {
            Some(lm) => lm.clone(),
            None => Arc::new(connect(&spec.base, ctx)?.ok_or_else(|| Error::Config("unresolvable base model".into()))?),
        };
        let pair = match &spec.guidance {
            Some(g) => Some(GuidancePair::new(scoring_model(&g.tuned, ctx)?, scoring_model(&g.untuned, ctx)?)?),
            None => None,
        };
        let reward_vocab: Option<&Vocab> = base_lm.as_deref().map(crate::tabular::LanguageModel::vocab);
        let gold = match (&spec.gold_reward, reward_vocab) {
            (Some(r), Some(v)) => Some(r.build(v)?),
            (Some(_), None) => return Err(Error::Config("gold rewards need a tabular base model".into())),
            (None, _) => None,
        };
        let texts = spec.prompts.texts(&ctx.base_dir)?;
        let prompts = texts
            .iter()
            .map(|t| match base.vocab() {
                Some(v) => Prompt::encode(v, t),
                None => Ok(Prompt::text(t.clone())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { base, base_lm, pair, gold, prompts })
    }

    fn pair(&self) -> Result<&GuidancePair> {
        self.pair.as_ref().ok_or_else(|| Error::Config("method needs a guidance pair".into()))
    }

    /// Guidance score of a finished response, computed from scratch.
    pub fn rescore(&self, prompt: &Prompt, response: &Response) -> Result<f64> {
        let pair = self.pair()?;
        let shared = matches!((self.base.vocab(), pair.vocab()), (Some(b), Some(p)) if b == p);
        match (&prompt.tokens, shared) {
            (Some(x), true) => Ok(guidance_score(pair, x, &response.tokens)?.0),
            _ => Ok(pair.score_text(&prompt.text, &response.text, response.ended)?.0),
        }
    }
}

/// What a single method call produced.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub response: Response,
    pub truncated: bool,
    pub score: Option<f64>,
    pub sampled_tokens: usize,
    pub rounds: usize,
}

pub fn run_method(res: &Resources, method: &Method, prompt: &Prompt, sampling: &SamplingParams, max_tokens: usize) -> Result<MethodOutcome> {
    let base = res.base.as_ref();
    let plain = |response: Response| -> Result<MethodOutcome> {
        let score = match &res.pair {
            Some(_) => Some(res.rescore(prompt, &response)?),
            None => None,
        };
        Ok(MethodOutcome {
            truncated: response.is_truncated(max_tokens),
            sampled_tokens: response.len,
            rounds: 1,
            score,
            response,
        })
    };
    match method {
        Method::Base => plain(sample_base(base, prompt, sampling, max_tokens)?),
        Method::Eft { beta } => plain(eft_decode(base, res.pair()?, prompt, *beta, sampling, max_tokens)?),
        Method::Bon { n } => {
            let out = best_of_n(base, res.pair()?, prompt, *n, sampling, max_tokens)?;
            Ok(MethodOutcome {
                truncated: out.best.truncated,
                score: Some(out.best.score.0),
                sampled_tokens: out.sampled_tokens,
                rounds: 1,
                response: out.best.response,
            })
        }
        Method::Cbs { beam_width, successors, chunk_length } => {
            let config = SearchConfig::new(*beam_width, *successors, *chunk_length, max_tokens).with_sampling(sampling.clone());
            let out = cbs(base, res.pair()?, prompt, &config)?;
            Ok(MethodOutcome {
                truncated: out.best.truncated,
                score: Some(out.best.score.0),
                sampled_tokens: out.sampled_tokens,
                rounds: out.rounds,
                response: out.best.response,
            })
        }
        Method::TokenBeam { beam_width } => {
            let lm = res.base_lm.as_deref().ok_or_else(|| Error::Config("token beam search needs a tabular base".into()))?;
            let tokens = prompt.tokens.as_deref().ok_or_else(|| Error::Config("token beam search needs a tokenized prompt".into()))?;
            let best = token_beam_search(lm, res.pair()?, tokens, *beam_width, max_tokens, sampling, DEFAULT_BRANCH_BUDGET)?;
            Ok(MethodOutcome {
                truncated: best.truncated,
                score: Some(best.score.0),
                sampled_tokens: 0,
                rounds: best.response.len,
                response: best.response,
            })
        }
    }
}

/// Seed for prompt `index` of a run.
pub fn prompt_seed(run_seed: u64, index: usize) -> u64 {
    mix_seed(&[run_seed, index as u64])
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs `method` over every prompt of the task. Records come back in prompt
/// order; per-prompt failures are stored in the record's `error` field.
pub fn run_method_records(spec: &TaskSpec, res: &Resources, method: &Method, ctx: &RunContext) -> Result<Vec<RunRecord>> {
    let one = |index: usize| -> RunRecord {
        let prompt = &res.prompts[index];
        let seed = prompt_seed(spec.seed, index);
        let sampling = spec.sampling.with_seed(seed);
        let start = Instant::now();
        let outcome = run_method(res, method, prompt, &sampling, spec.max_tokens);
        let wall_time_ms = spec.record_timing.then(|| start.elapsed().as_secs_f64() * 1e3);
        let mut rec = RunRecord {
            task: spec.name.clone(),
            index,
            prompt: prompt.text.clone(),
            prompt_tokens: prompt.tokens.clone(),
            method: method.clone(),
            seed,
            response: String::new(),
            response_tokens: TokenSeq::new(),
            ended: false,
            truncated: false,
            guidance_score: None,
            gold_reward: None,
            sampled_tokens: 0,
            rounds: 0,
            wall_time_ms,
            error: None,
        };
        match outcome {
            Ok(o) => {
                rec.gold_reward = match (&res.gold, &prompt.tokens) {
                    (Some(r), Some(x)) => Some(r.evaluate(x, &o.response.tokens)),
                    _ => None,
                };
                rec.response = o.response.text;
                rec.response_tokens = o.response.tokens;
                rec.ended = o.response.ended;
                rec.truncated = o.truncated;
                rec.guidance_score = o.score;
                rec.sampled_tokens = o.sampled_tokens;
                rec.rounds = o.rounds;
            }
            Err(e) => {
                warn!("prompt {index} ({}) failed: {e}", method.label());
                rec.error = Some(e.to_string());
            }
        }
        rec
    };
    let n = res.prompts.len();
    Ok(pool(ctx.parallelism)?.install(|| (0..n).into_par_iter().map(one).collect()))
}

/// Runs the task's primary method.
pub fn run_experiment(spec: &TaskSpec, ctx: &RunContext) -> Result<Vec<RunRecord>> {
    let res = Resources::resolve(spec, ctx)?;
    run_method_records(spec, &res, &spec.method, ctx)
}

/// Absolute difference between a record's stored score and a recomputation
/// from its stored tokens (or text, for text-only bases).
pub fn verify_record(res: &Resources, record: &RunRecord) -> Result<f64> {
    let stored = record.guidance_score.ok_or_else(|| Error::InvalidParameter("record has no guidance score".into()))?;
    let prompt = Prompt { text: record.prompt.clone(), tokens: record.prompt_tokens.clone() };
    let response = Response {
        tokens: record.response_tokens.clone(),
        text: record.response.clone(),
        len: record.response_tokens.len(),
        ended: record.ended,
    };
    Ok((res.rescore(&prompt, &response)? - stored).abs())
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[RunRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_jsonl_file(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(file), records)
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_jsonl_file(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}
