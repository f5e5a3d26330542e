//! Decoding-time alignment by chunk-level beam search over the log-probability
//! difference of a tuned/untuned guidance pair, together with an exact tabular
//! soft-RL oracle used to verify the scoring identities the search relies on.

pub mod error;
pub mod guidance;
pub mod harness;
pub mod remote;
pub mod sampling;
pub mod search;
pub mod soft;
pub mod tabular;
pub mod tokens;

pub use error::{Error, Result};
pub use guidance::{cross_vocab_score, eft_compose, guidance_score, GuidancePair, GuidanceScore, ScoringModel};
pub use sampling::{apply_sampling_filters, draw, LogitVector, SamplingParams, TopK};
pub use search::{best_of_n, cbs, eft_decode, sample_base, token_beam_search, BaseModel, ChunkLength, Hypothesis, Prompt, Response, SearchConfig};
pub use soft::{optimal_policy, soft_value_iteration, verify_duality, SoftMDPSpec, TerminalReward, ValueTables};
pub use tabular::{sequence_logprob, LanguageModel, TabularLM};
pub use tokens::{TokenId, TokenSeq, Vocab};
