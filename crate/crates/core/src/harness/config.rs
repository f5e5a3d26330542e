//! Task configuration, stored as TOML.
//!
//! ```toml
//! name = "weak-to-strong"
//! seed = 7
//! max_tokens = 4
//! base = { builtin = "w2s-base" }
//! guidance = { tuned = { builtin = "w2s-tuned" }, untuned = { builtin = "w2s-ref" } }
//! gold_reward = { kind = "count_symbol", symbol = "a", weight = 1.0 }
//! prompts = { cycle = { symbols = ["a", "b", "c"], count = 1000 } }
//! sampling = { temperature = 1.0, top_k = "all", top_p = 1.0 }
//! method = { kind = "cbs", beam_width = 4, successors = 4, chunk_length = 2 }
//! compare = [{ kind = "base" }, { kind = "bon", n = 16 }]
//! ```
//!
//! Relative fixture and prompt-file paths resolve against the config file's
//! directory. `sampling.seed` is ignored: prompt `i` runs with the seed
//! `mix_seed([seed, i])`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::remote::EndpointConfig;
use crate::sampling::SamplingParams;
use crate::search::ChunkLength;
use crate::soft::TerminalReward;
use crate::tokens::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub prompts: PromptSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_reward: Option<RewardSpec>,
    pub base: ModelSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<GuidanceSpec>,
    pub method: Method,
    /// Extra methods for `compare`, run alongside `method` on the same prompts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub compare: Vec<Method>,
    #[serde(default = "unfiltered")]
    pub sampling: SamplingParams,
    pub max_tokens: usize,
    /// Allow comparing bon(N) with cbs(W, K) when N != W * K.
    #[serde(default)]
    pub budget_override: bool,
    /// Store wall time in records (makes output files non-reproducible).
    #[serde(default)]
    pub record_timing: bool,
    /// Trials for the induced-KL estimate in comparisons (first prompt only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_trials: Option<usize>,
    /// Bootstrap resamples for comparisons.
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

fn unfiltered() -> SamplingParams {
    SamplingParams::unfiltered(0)
}

fn default_resamples() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSet {
    /// Texts, tokenized under the base vocabulary when it has one.
    Inline(Vec<String>),
    /// One text prompt per line; blank lines are skipped.
    File(PathBuf),
    /// `count` single-symbol prompts cycling through `symbols`.
    Cycle { symbols: Vec<String>, count: usize },
}

impl PromptSet {
    pub fn texts(&self, base_dir: &Path) -> Result<Vec<String>> {
        match self {
            PromptSet::Inline(v) => Ok(v.clone()),
            PromptSet::File(p) => {
                let text = std::fs::read_to_string(base_dir.join(p))?;
                Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
            }
            PromptSet::Cycle { symbols, count } => {
                if symbols.is_empty() {
                    return Err(Error::Config("cycle needs at least one symbol".into()));
                }
                Ok((0..*count).map(|i| symbols[i % symbols.len()].clone()).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Builtin(String),
    Fixture(PathBuf),
    Endpoint(EndpointConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub tuned: ModelSource,
    pub untuned: ModelSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    /// `weight` per occurrence of `symbol` in the response.
    CountSymbol { symbol: String, weight: f64 },
    /// `value` if the response contains `symbol`, else 0.
    Contains { symbol: String, value: f64 },
    Constant { value: f64 },
}

impl RewardSpec {
    pub fn build(&self, vocab: &Vocab) -> Result<TerminalReward> {
        let id = |s: &str| vocab.id_of(s).ok_or_else(|| Error::Config(format!("reward symbol {s:?} not in vocabulary")));
        Ok(match self {
            RewardSpec::CountSymbol { symbol, weight } => TerminalReward::count_symbol(id(symbol)?, *weight),
            RewardSpec::Contains { symbol, value } => {
                let (s, v) = (id(symbol)?, *value);
                TerminalReward::new(move |_, y| if y.contains(&s) { v } else { 0.0 })
            }
            RewardSpec::Constant { value } => TerminalReward::constant(*value),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Base,
    Bon { n: usize },
    Eft { beta: f64 },
    Cbs { beam_width: usize, successors: usize, chunk_length: ChunkLength },
    TokenBeam { beam_width: usize },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Base => "base".into(),
            Method::Bon { n } => format!("bon({n})"),
            Method::Eft { beta } => format!("eft({beta})"),
            Method::Cbs { beam_width, successors, chunk_length } => {
                let l = match chunk_length {
                    ChunkLength::Tokens(l) => l.to_string(),
                    ChunkLength::Infinite => "inf".into(),
                };
                format!("cbs({beam_width},{successors},{l})")
            }
            Method::TokenBeam { beam_width } => format!("token_beam({beam_width})"),
        }
    }

    /// Successor samples per round, for the N = W * K fairness rule.
    pub fn sample_budget(&self) -> Option<usize> {
        match self {
            Method::Bon { n } => Some(*n),
            Method::Cbs { beam_width, successors, .. } => Some(beam_width * successors),
            _ => None,
        }
    }
}

impl TaskSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: TaskSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn methods(&self) -> Vec<Method> {
        std::iter::once(self.method.clone()).chain(self.compare.iter().cloned()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        self.sampling.validate()?;
        for m in self.methods() {
            let needs_guidance = !matches!(m, Method::Base);
            if needs_guidance && self.guidance.is_none() {
                return Err(Error::Config(format!("method {} needs a guidance pair", m.label())));
            }
            let bad = match m {
                Method::Bon { n } => n == 0,
                Method::Eft { beta } => beta.is_nan() || beta <= 0.0,
                Method::Cbs { beam_width, successors, chunk_length } => {
                    beam_width == 0 || successors == 0 || chunk_length == ChunkLength::Tokens(0)
                }
                Method::TokenBeam { beam_width } => beam_width == 0,
                Method::Base => false,
            };
            if bad {
                return Err(Error::Config(format!("invalid parameters for {}", m.label())));
            }
        }
        Ok(())
    }
}
