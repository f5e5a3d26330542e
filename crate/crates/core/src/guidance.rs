//! The steering signal: log-probability differences under a tuned/untuned pair.
//!
//! Scores are kept in natural-log units with β and `log Z(x)` dropped; both
//! are constants per prompt and cannot change a Top-W selection.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::LogitVector;
use crate::tabular::LanguageModel;
use crate::tokens::{TokenId, TokenSeq, Vocab};

/// A model that can assign log-probabilities to continuations.
///
/// In-process models implement this through the blanket impl over
/// [`LanguageModel`]. Remote models work on text only and report no vocabulary.
pub trait ScoringModel: Send + Sync {
    fn vocab(&self) -> Option<&Vocab>;

    /// Per-token log-probabilities of `continuation` after `prompt ∘ prefix`.
    fn continuation_logprobs(&self, prompt: &[TokenId], prefix: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>>;

    fn next_token_logprobs(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>>;

    /// `log p(full_text[prompt_text.len()..] | prompt_text)` for text-only scorers.
    fn text_logprob(&self, prompt_text: &str, full_text: &str) -> Result<f64>;
}

impl<T: LanguageModel> ScoringModel for T {
    fn vocab(&self) -> Option<&Vocab> {
        Some(LanguageModel::vocab(self))
    }

    fn continuation_logprobs(&self, prompt: &[TokenId], prefix: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>> {
        let mut ctx = prefix.to_vec();
        let mut out = Vec::with_capacity(continuation.len());
        for &tok in continuation {
            let lp = LanguageModel::next_token_logprobs(self, prompt, &ctx)?;
            out.push(*lp.get(tok as usize).ok_or_else(|| Error::InvalidSequence(format!("token {tok} out of range")))?);
            ctx.push(tok);
        }
        Ok(out)
    }

    fn next_token_logprobs(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        LanguageModel::next_token_logprobs(self, prompt, prefix)
    }

    fn text_logprob(&self, prompt_text: &str, full_text: &str) -> Result<f64> {
        let vocab = LanguageModel::vocab(self);
        let (prompt, response) = split_joint_encoding(vocab, prompt_text, full_text, false)?;
        Ok(self.continuation_logprobs(&prompt, &[], &response)?.iter().sum())
    }
}

/// Guidance score in natural-log units.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GuidanceScore(pub f64);

impl GuidanceScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Tuned (π*) and untuned (π_ref) models over one vocabulary.
#[derive(Clone)]
pub struct GuidancePair {
    tuned: Arc<dyn ScoringModel>,
    untuned: Arc<dyn ScoringModel>,
}

impl std::fmt::Debug for GuidancePair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GuidancePair").field("vocab", &self.vocab()).finish()
    }
}

impl GuidancePair {
    pub fn new(tuned: Arc<dyn ScoringModel>, untuned: Arc<dyn ScoringModel>) -> Result<Self> {
        if tuned.vocab() != untuned.vocab() {
            return Err(Error::VocabMismatch("tuned and untuned models use different vocabularies".into()));
        }
        Ok(Self { tuned, untuned })
    }

    pub fn from_models<A: ScoringModel + 'static, B: ScoringModel + 'static>(tuned: A, untuned: B) -> Result<Self> {
        Self::new(Arc::new(tuned), Arc::new(untuned))
    }

    pub fn tuned(&self) -> &dyn ScoringModel {
        self.tuned.as_ref()
    }

    pub fn untuned(&self) -> &dyn ScoringModel {
        self.untuned.as_ref()
    }

    /// `None` for text-only (remote) pairs.
    pub fn vocab(&self) -> Option<&Vocab> {
        self.tuned.vocab()
    }

    /// Adds the log-ratio of `continuation` (given `prompt ∘ prefix`) onto `prior`,
    /// one token at a time, left to right.
    pub fn extend_score(
        &self,
        prompt: &[TokenId],
        prefix: &[TokenId],
        prior: GuidanceScore,
        continuation: &[TokenId],
    ) -> Result<GuidanceScore> {
        if let Some(v) = self.vocab() {
            v.check(&TokenSeq::from(prefix).concat(continuation))?;
        }
        let tuned = self.tuned.continuation_logprobs(prompt, prefix, continuation)?;
        let untuned = self.untuned.continuation_logprobs(prompt, prefix, continuation)?;
        let mut total = prior.0;
        for (a, b) in tuned.iter().zip(&untuned) {
            if *a == f64::NEG_INFINITY {
                return Err(Error::ZeroSupport { model: "tuned" });
            }
            if *b == f64::NEG_INFINITY {
                return Err(Error::ZeroSupport { model: "untuned" });
            }
            total += a - b;
        }
        Ok(GuidanceScore(total))
    }

    /// Scores text under the pair. Token pairs re-encode `prompt_text ∘
    /// response_text` jointly and append EOS when `complete`; text-only pairs
    /// score the continuation remotely and ignore `complete`.
    pub fn score_text(&self, prompt_text: &str, response_text: &str, complete: bool) -> Result<GuidanceScore> {
        let full = format!("{prompt_text}{response_text}");
        match self.vocab() {
            Some(vocab) => {
                let (prompt, response) = split_joint_encoding(vocab, prompt_text, &full, complete)?;
                guidance_score(self, &prompt, &response)
            }
            None => {
                let a = self.tuned.text_logprob(prompt_text, &full)?;
                let b = self.untuned.text_logprob(prompt_text, &full)?;
                if a == f64::NEG_INFINITY {
                    return Err(Error::ZeroSupport { model: "tuned" });
                }
                if b == f64::NEG_INFINITY {
                    return Err(Error::ZeroSupport { model: "untuned" });
                }
                Ok(GuidanceScore(a - b))
            }
        }
    }
}

/// Encodes `full_text` under `vocab` and splits it after as many tokens as
/// `prompt_text` alone encodes to.
fn split_joint_encoding(vocab: &Vocab, prompt_text: &str, full_text: &str, complete: bool) -> Result<(TokenSeq, TokenSeq)> {
    let joint = vocab.encode(full_text)?;
    let n_prompt = vocab.encode(prompt_text)?.len().min(joint.len());
    let prompt = TokenSeq::from(&joint[..n_prompt]);
    let mut response = TokenSeq::from(&joint[n_prompt..]);
    if complete {
        response.push(vocab.eos_id());
    }
    Ok((prompt, response))
}

/// `log π*(prefix | prompt) − log π_ref(prefix | prompt)` as a left-to-right
/// sum of per-token log-ratios.
pub fn guidance_score(pair: &GuidancePair, prompt: &[TokenId], prefix: &[TokenId]) -> Result<GuidanceScore> {
    if pair.vocab().is_none() {
        return Err(Error::ScoringUnsupported);
    }
    pair.extend_score(prompt, &[], GuidanceScore(0.0), prefix)
}

/// Re-scores a base-model response under the pair's vocabulary: decode under
/// `base_vocab`, re-encode jointly with the prompt, score from scratch.
pub fn cross_vocab_score(pair: &GuidancePair, base_vocab: &Vocab, prompt_text: &str, response: &[TokenId]) -> Result<GuidanceScore> {
    base_vocab.check(response)?;
    let text = base_vocab.decode(response);
    pair.score_text(prompt_text, &text, base_vocab.is_complete(response))
}

/// `base + β⁻¹ (tuned − untuned)` on log-probability vectors.
///
/// An entry masked (`-inf`) in any input stays masked in the output.
pub fn eft_compose(base: &[f64], tuned: &[f64], untuned: &[f64], beta: f64) -> Result<LogitVector> {
    if base.len() != tuned.len() || base.len() != untuned.len() {
        return Err(Error::VocabMismatch(format!(
            "EFT inputs have lengths {}, {}, {}",
            base.len(),
            tuned.len(),
            untuned.len()
        )));
    }
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::InvalidParameter(format!("beta must be > 0, got {beta}")));
    }
    let out = base
        .iter()
        .zip(tuned)
        .zip(untuned)
        .map(|((&b, &t), &u)| {
            if b == f64::NEG_INFINITY || t == f64::NEG_INFINITY || u == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                b + (t - u) / beta
            }
        })
        .collect();
    LogitVector::new(out)
}

/// β grid swept for EFT.
pub const EFT_BETA_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{sequence_logprob, TabularLM};

    fn model(seed: f64) -> TabularLM {
        let v = Vocab::with_eos(["a", "b", "c"]).unwrap();
        let mut m = TabularLM::new(v, 1, 5).unwrap();
        m.set_row(&[], vec![seed, 0.3, -0.2, -1.0]).unwrap();
        for t in 0..3u32 {
            let x = t as f64;
            m.set_row(&[t], vec![0.1 * x + seed, -0.3 * x, 0.2, -0.5 + 0.1 * seed]).unwrap();
        }
        m
    }

    #[test]
    fn identical_models_score_zero() {
        let pair = GuidancePair::from_models(model(0.4), model(0.4)).unwrap();
        for prefix in [vec![], vec![0], vec![1, 2, 0], vec![2, 2, 3]] {
            assert_eq!(guidance_score(&pair, &[1], &prefix).unwrap().0, 0.0);
        }
    }

    #[test]
    fn score_equals_logprob_difference() {
        let (t, u) = (model(0.9), model(-0.3));
        let pair = GuidancePair::from_models(t.clone(), u.clone()).unwrap();
        let y = [0, 1, 1, 3];
        let s = guidance_score(&pair, &[2], &y).unwrap().0;
        let d = sequence_logprob(&t, &[2], &y).unwrap() - sequence_logprob(&u, &[2], &y).unwrap();
        assert!((s - d).abs() < 1e-12);
    }

    #[test]
    fn extension_is_exactly_additive() {
        let pair = GuidancePair::from_models(model(0.9), model(-0.3)).unwrap();
        let y = [0u32, 2, 1, 3];
        let whole = guidance_score(&pair, &[], &y).unwrap();
        let head = guidance_score(&pair, &[], &y[..2]).unwrap();
        let extended = pair.extend_score(&[], &y[..2], head, &y[2..]).unwrap();
        assert_eq!(whole.0.to_bits(), extended.0.to_bits());
    }

    #[test]
    fn zero_support_is_an_error() {
        let v = Vocab::with_eos(["a", "b"]).unwrap();
        let masked = TabularLM::new(v.clone(), 0, 4).unwrap().with_default(vec![0.0, f64::NEG_INFINITY, 0.0]).unwrap();
        let pair = GuidancePair::from_models(masked, TabularLM::uniform(v, 4).unwrap()).unwrap();
        assert!(matches!(guidance_score(&pair, &[], &[1]), Err(Error::ZeroSupport { model: "tuned" })));
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let a = TabularLM::uniform(Vocab::with_eos(["a", "b"]).unwrap(), 3).unwrap();
        let b = TabularLM::uniform(Vocab::with_eos(["a", "c"]).unwrap(), 3).unwrap();
        assert!(matches!(GuidancePair::from_models(a, b), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn cross_vocab_same_vocab_matches_direct() {
        let pair = GuidancePair::from_models(model(0.9), model(-0.3)).unwrap();
        let vocab = pair.vocab().unwrap().clone();
        let prompt = [1u32];
        let y = [0u32, 2, 3];
        let direct = guidance_score(&pair, &prompt, &y).unwrap();
        let via_text = cross_vocab_score(&pair, &vocab, &vocab.decode(&prompt), &y).unwrap();
        assert_eq!(direct, via_text);
    }

    #[test]
    fn cross_vocab_re_encodes_merged_symbols() {
        let v = Vocab::with_eos(["a", "b", "c"]).unwrap();
        let (t, u) = (model(0.9), model(-0.3));
        let pair = GuidancePair::from_models(t, u).unwrap();
        let base_vocab = Vocab::with_eos(["ab", "c"]).unwrap();
        let s = cross_vocab_score(&pair, &base_vocab, "", &[0]).unwrap();
        let direct = guidance_score(&pair, &[], &v.encode("ab").unwrap()).unwrap();
        assert_eq!(v.encode("ab").unwrap().0, vec![0, 1]);
        assert_eq!(s, direct);
    }

    #[test]
    fn eft_with_unit_beta_and_base_equal_untuned_gives_tuned() {
        let tuned = crate::sampling::log_softmax(&[0.2, -1.0, 0.7]);
        let base = crate::sampling::log_softmax(&[1.1, 0.4, -0.3]);
        let out = eft_compose(&base, &tuned, &base, 1.0).unwrap().softmax();
        for (a, b) in out.iter().zip(tuned.iter().map(|x| x.exp())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eft_with_equal_guidance_gives_base() {
        let g = crate::sampling::log_softmax(&[0.2, -1.0, 0.7]);
        let base = crate::sampling::log_softmax(&[1.1, 0.4, -0.3]);
        let out = eft_compose(&base, &g, &g, 0.5).unwrap();
        assert_eq!(out.values(), base.as_slice());
    }

    #[test]
    fn eft_length_mismatch() {
        assert!(matches!(eft_compose(&[0.0], &[0.0, 0.0], &[0.0], 1.0), Err(Error::VocabMismatch(_))));
    }
}
