//! Exact soft (entropy-regularized) value iteration over the token-level MDP.
//!
//! States are `prompt ∘ prefix`, actions are vocabulary entries, transitions
//! append the action, and the only reward is the terminal reward paid on EOS.
//! Backward induction gives
//!
//! ```text
//! Q(s, a) = r(s, a) + β log π_ref(a | s) + V(s ∘ a)
//! V(s)    = β log Σ_a exp(Q(s, a) / β)        (V = 0 after EOS)
//! π*(a|s) = exp((Q(s, a) - V(s)) / β)
//! ```
//!
//! and `V(prompt) = β log Z(x)` with `Z(x) = Σ_y π_ref(y|x) exp(r(x, y) / β)`.
//! `log Z` is stored from the exhaustive sum; [`ValueTables::log_z_recursive`]
//! gives the recursion route for cross-checking.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sampling::log_sum_exp;
use crate::tabular::{enumerate_responses, sequence_logprob, LanguageModel, TabularLM};
use crate::tokens::{TokenId, TokenSeq};

pub const DEFAULT_STATE_BUDGET: usize = 1_000_000;

type RewardFn = dyn Fn(&[TokenId], &[TokenId]) -> f64 + Send + Sync;

/// Reward paid once, on the complete response (including its trailing EOS).
#[derive(Clone)]
pub struct TerminalReward(Arc<RewardFn>);

impl TerminalReward {
    pub fn new(f: impl Fn(&[TokenId], &[TokenId]) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _| c)
    }

    /// `weight` per occurrence of `symbol` in the response.
    pub fn count_symbol(symbol: TokenId, weight: f64) -> Self {
        Self::new(move |_, y| weight * y.iter().filter(|&&t| t == symbol).count() as f64)
    }

    pub fn evaluate(&self, prompt: &[TokenId], response: &[TokenId]) -> f64 {
        (self.0)(prompt, response)
    }
}

impl fmt::Debug for TerminalReward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TerminalReward(..)")
    }
}

#[derive(Debug, Clone)]
pub struct SoftMDPSpec {
    reference: TabularLM,
    reward: TerminalReward,
    beta: f64,
    prompt: TokenSeq,
    horizon: usize,
    state_budget: usize,
}

impl SoftMDPSpec {
    /// `horizon` must not exceed the reference's cap; the reference is
    /// re-capped at `horizon` for this MDP.
    pub fn new(reference: &TabularLM, reward: TerminalReward, beta: f64, prompt: TokenSeq, horizon: usize) -> Result<Self> {
        if beta.is_nan() || beta <= 0.0 || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be > 0, got {beta}")));
        }
        if horizon > reference.horizon_cap() {
            return Err(Error::InvalidParameter(format!(
                "horizon {horizon} exceeds reference cap {}",
                reference.horizon_cap()
            )));
        }
        reference.vocab().check(&prompt)?;
        if reference.vocab().is_complete(&prompt) {
            return Err(Error::InvalidSequence("prompt may not contain EOS".into()));
        }
        Ok(Self {
            reference: reference.with_horizon_cap(horizon)?,
            reward,
            beta,
            prompt,
            horizon,
            state_budget: DEFAULT_STATE_BUDGET,
        })
    }

    pub fn with_state_budget(mut self, budget: usize) -> Self {
        self.state_budget = budget;
        self
    }

    pub fn reference(&self) -> &TabularLM {
        &self.reference
    }

    pub fn reward(&self) -> &TerminalReward {
        &self.reward
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn prompt(&self) -> &TokenSeq {
        &self.prompt
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_budget(&self) -> usize {
        self.state_budget
    }
}

/// Optimal soft values keyed by response prefix (the prompt is fixed per table).
#[derive(Debug, Clone)]
pub struct ValueTables {
    prompt: TokenSeq,
    beta: f64,
    eos: TokenId,
    v: HashMap<Vec<TokenId>, f64>,
    q: HashMap<Vec<TokenId>, Vec<f64>>,
    log_z: f64,
}

impl ValueTables {
    pub fn prompt(&self) -> &TokenSeq {
        &self.prompt
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `V*(x, prefix)`; zero for complete prefixes, `None` for unreachable ones.
    pub fn v(&self, prefix: &[TokenId]) -> Option<f64> {
        if prefix.last() == Some(&self.eos) {
            return Some(0.0);
        }
        self.v.get(prefix).copied()
    }

    pub fn q(&self, prefix: &[TokenId], action: TokenId) -> Option<f64> {
        self.q.get(prefix).and_then(|row| row.get(action as usize)).copied()
    }

    pub fn q_row(&self, prefix: &[TokenId]) -> Option<&[f64]> {
        self.q.get(prefix).map(Vec::as_slice)
    }

    /// `log Z(x)` from the exhaustive sum over complete responses.
    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    /// `V*(x) / β`, the recursion route to `log Z(x)`.
    pub fn log_z_recursive(&self) -> f64 {
        self.v[&Vec::new()] / self.beta
    }

    pub fn state_count(&self) -> usize {
        self.v.len()
    }

    /// Incomplete prefixes in lexicographic order.
    pub fn states(&self) -> Vec<&[TokenId]> {
        let mut s: Vec<&[TokenId]> = self.v.keys().map(Vec::as_slice).collect();
        s.sort();
        s
    }
}

pub fn soft_value_iteration(spec: &SoftMDPSpec) -> Result<ValueTables> {
    struct Walker<'a> {
        spec: &'a SoftMDPSpec,
        v: HashMap<Vec<TokenId>, f64>,
        q: HashMap<Vec<TokenId>, Vec<f64>>,
    }

    impl Walker<'_> {
        fn value(&mut self, prefix: &mut Vec<TokenId>) -> Result<f64> {
            if self.v.len() >= self.spec.state_budget {
                return Err(Error::StateSpaceTooLarge { limit: self.spec.state_budget });
            }
            let beta = self.spec.beta;
            let eos = self.spec.reference.vocab().eos_id();
            let log_ref = self.spec.reference.next_token_logprobs(&self.spec.prompt, prefix)?;
            let mut q_row = vec![f64::NEG_INFINITY; log_ref.len()];
            for (a, &lp) in log_ref.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                prefix.push(a as TokenId);
                let tail = if a as TokenId == eos {
                    self.spec.reward.evaluate(&self.spec.prompt, prefix)
                } else {
                    self.value(prefix)?
                };
                prefix.pop();
                q_row[a] = beta * lp + tail;
            }
            let scaled: Vec<f64> = q_row.iter().map(|q| q / beta).collect();
            let v = beta * log_sum_exp(&scaled);
            self.v.insert(prefix.clone(), v);
            self.q.insert(prefix.clone(), q_row);
            Ok(v)
        }
    }

    let mut walker = Walker { spec, v: HashMap::new(), q: HashMap::new() };
    walker.value(&mut Vec::new())?;

    let log_z = exhaustive_log_z(spec)?;
    Ok(ValueTables {
        prompt: spec.prompt.clone(),
        beta: spec.beta,
        eos: spec.reference.vocab().eos_id(),
        v: walker.v,
        q: walker.q,
        log_z,
    })
}

/// `log Σ_y π_ref(y|x) exp(r(x, y) / β)` by enumerating every complete response.
pub fn exhaustive_log_z(spec: &SoftMDPSpec) -> Result<f64> {
    let ys = enumerate_responses(&spec.reference, &spec.prompt, None, spec.state_budget)?;
    let terms: Vec<f64> = ys
        .iter()
        .map(|(y, lp)| lp + spec.reward.evaluate(&spec.prompt, y) / spec.beta)
        .collect();
    Ok(log_sum_exp(&terms))
}

/// The Gibbs-form optimal policy as a full-context table (order = prompt + horizon).
pub fn optimal_policy(tables: &ValueTables, spec: &SoftMDPSpec) -> Result<TabularLM> {
    let vocab = spec.reference.vocab().clone();
    let order = spec.prompt.len() + spec.horizon;
    let mut policy = TabularLM::new(vocab, order, spec.horizon)?;
    for (prefix, q_row) in &tables.q {
        let v = tables.v[prefix];
        let logits: Vec<f64> = q_row.iter().map(|q| (q - v) / tables.beta).collect();
        policy.set_row(&spec.prompt.concat(prefix), logits)?;
    }
    Ok(policy)
}

/// Convenience: solve and return `(tables, π*)`.
pub fn solve(spec: &SoftMDPSpec) -> Result<(ValueTables, TabularLM)> {
    let tables = soft_value_iteration(spec)?;
    let policy = optimal_policy(&tables, spec)?;
    Ok((tables, policy))
}

/// `max_y |β (log π*(y|x) − log π_ref(y|x)) + β log Z(x) − r(x, y)|` over every
/// complete `y` in the reference support.
pub fn verify_duality<M: LanguageModel + ?Sized>(spec: &SoftMDPSpec, tables: &ValueTables, pi_star: &M) -> Result<f64> {
    let ys = enumerate_responses(&spec.reference, &spec.prompt, None, spec.state_budget)?;
    let beta = spec.beta;
    let mut worst: f64 = 0.0;
    for (y, lp_ref) in ys {
        let lp_star = match sequence_logprob(pi_star, &spec.prompt, &y) {
            Ok(v) => v,
            Err(Error::MissingContext { .. }) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        let r = spec.reward.evaluate(&spec.prompt, &y);
        let err = (beta * (lp_star - lp_ref) + beta * tables.log_z - r).abs();
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(worst)
}

/// Max error of the value identity over every prefix in the reference support:
/// `β (log π*(y'|x) − log π_ref(y'|x)) = V*(x, y') − V*(x)` for incomplete `y'`
/// and `= r(x, y') − V*(x)` for complete `y'`.
pub fn verify_value_identity<M: LanguageModel + ?Sized>(spec: &SoftMDPSpec, tables: &ValueTables, pi_star: &M) -> Result<f64> {
    let beta = spec.beta;
    let v_root = tables.v(&[]).unwrap_or(f64::NAN);
    let eos = spec.reference.vocab().eos_id();
    let mut worst: f64 = 0.0;
    for prefix in tables.states() {
        let lp_ref_state = sequence_logprob(&spec.reference, &spec.prompt, prefix)?;
        let lp_star_state = sequence_logprob(pi_star, &spec.prompt, prefix)?;
        let lr_ref = spec.reference.next_token_logprobs(&spec.prompt, prefix)?;
        let lr_star = pi_star.next_token_logprobs(&spec.prompt, prefix)?;
        // the prefix itself (incomplete) ...
        let lhs = beta * (lp_star_state - lp_ref_state);
        worst = worst.max((lhs - (tables.v(prefix).unwrap_or(f64::NAN) - v_root)).abs());
        // ... and its EOS completion
        if lr_ref[eos as usize] > f64::NEG_INFINITY {
            let y = TokenSeq::from(prefix).concat(&[eos]);
            let lhs = beta * ((lp_star_state + lr_star[eos as usize]) - (lp_ref_state + lr_ref[eos as usize]));
            let r = spec.reward.evaluate(&spec.prompt, &y);
            worst = worst.max((lhs - (r - v_root)).abs());
        }
    }
    Ok(if worst.is_nan() { f64::INFINITY } else { worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::Vocab;

    fn reference() -> TabularLM {
        let v = Vocab::with_eos(["a", "b"]).unwrap();
        TabularLM::new(v, 1, 4)
            .unwrap()
            .with_row(&[], vec![0.2, -0.1, -1.0])
            .unwrap()
            .with_row(&[0], vec![-0.4, 0.3, 0.0])
            .unwrap()
            .with_row(&[1], vec![0.5, 0.1, -0.2])
            .unwrap()
    }

    #[test]
    fn zero_reward_recovers_reference() {
        let r = reference();
        let spec = SoftMDPSpec::new(&r, TerminalReward::zero(), 1.0, TokenSeq::new(), 4).unwrap();
        let (tables, pi) = solve(&spec).unwrap();
        assert!(tables.log_z().abs() < 1e-12);
        for s in tables.states() {
            assert!(tables.v(s).unwrap().abs() < 1e-12);
            let a = pi.next_token_logprobs(&[], s).unwrap();
            let b = r.next_token_logprobs(&[], s).unwrap();
            for (x, y) in a.iter().zip(&b) {
                if y.is_finite() {
                    assert!((x.exp() - y.exp()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_reward_shifts_value_only() {
        let r = reference();
        let c = 0.8;
        let spec = SoftMDPSpec::new(&r, TerminalReward::constant(c), 0.5, TokenSeq::new(), 4).unwrap();
        let (tables, _) = solve(&spec).unwrap();
        assert!((tables.log_z() - 2.0 * c).abs() < 1e-12);
        assert!((tables.v(&[]).unwrap() - c).abs() < 1e-12);
    }

    #[test]
    fn bellman_consistency_of_tables() {
        let r = reference();
        let spec = SoftMDPSpec::new(&r, TerminalReward::count_symbol(0, 1.0), 0.7, TokenSeq::new(), 4).unwrap();
        let tables = soft_value_iteration(&spec).unwrap();
        for s in tables.states() {
            let q: Vec<f64> = tables.q_row(s).unwrap().iter().map(|q| q / 0.7).collect();
            assert!((tables.v(s).unwrap() - 0.7 * log_sum_exp(&q)).abs() < 1e-9);
        }
        assert!((tables.log_z() - tables.log_z_recursive()).abs() < 1e-9);
    }

    #[test]
    fn large_beta_stays_near_reference() {
        let r = reference();
        let spec = SoftMDPSpec::new(&r, TerminalReward::count_symbol(0, 1.0), 1e4, TokenSeq::new(), 4).unwrap();
        let (tables, pi) = solve(&spec).unwrap();
        for s in tables.states() {
            let a = pi.next_token_logits(&[], s).unwrap().softmax();
            let b = r.next_token_logits(&[], s).unwrap().softmax();
            let tv: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0;
            assert!(tv < 1e-3);
        }
    }

    #[test]
    fn budget_is_enforced() {
        let r = reference();
        let spec = SoftMDPSpec::new(&r, TerminalReward::zero(), 1.0, TokenSeq::new(), 4)
            .unwrap()
            .with_state_budget(3);
        assert!(matches!(soft_value_iteration(&spec), Err(Error::StateSpaceTooLarge { limit: 3 })));
    }

    #[test]
    fn spec_validation() {
        let r = reference();
        assert!(SoftMDPSpec::new(&r, TerminalReward::zero(), 0.0, TokenSeq::new(), 4).is_err());
        assert!(SoftMDPSpec::new(&r, TerminalReward::zero(), 1.0, TokenSeq::new(), 5).is_err());
        assert!(SoftMDPSpec::new(&r, TerminalReward::zero(), 1.0, TokenSeq(vec![2]), 4).is_err());
    }

    #[test]
    fn perturbed_policy_breaks_duality() {
        let r = reference();
        let spec = SoftMDPSpec::new(&r, TerminalReward::count_symbol(1, 0.5), 1.0, TokenSeq::new(), 4).unwrap();
        let (tables, mut pi) = solve(&spec).unwrap();
        assert!(verify_duality(&spec, &tables, &pi).unwrap() < 1e-9);
        pi.set_row(&[0], vec![0.0, 0.0, 0.0]).unwrap();
        assert!(verify_duality(&spec, &tables, &pi).unwrap() > 1e-3);
    }
}
