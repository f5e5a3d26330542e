//! Evaluators: expected gold reward, induced KL, bootstrap comparisons.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Method, TaskSpec};
use super::run::{prompt_seed, run_method, run_method_records, Resources, RunContext, RunRecord};
use crate::error::{Error, Result};
use crate::sampling::{mix_seed, rng_from_seed, SamplingParams};
use crate::soft::TerminalReward;
use crate::tabular::{enumerate_responses, LanguageModel};
use crate::tokens::{TokenId, TokenSeq};

/// Default cap on enumerated sequences for exact evaluators.
pub const ENUMERATION_LIMIT: usize = 1_000_000;

/// A mean with its standard error. Exact values carry `std_err = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
    pub exact: bool,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { mean: value, std_err: 0.0, n: 0, exact: true }
    }

    /// Sample mean and `s / sqrt(n)` with the unbiased sample deviation.
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, std_err: f64::NAN, n, exact: false };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, std_err: (var / n as f64).sqrt(), n, exact: false }
    }
}

/// Draws one complete response for a trial seed.
pub type SequenceSampler<'a> = dyn Fn(u64) -> Result<TokenSeq> + Sync + 'a;

pub enum GoldMode<'a> {
    /// Enumerate the model's (optionally filtered) sequence distribution.
    Exact { model: &'a dyn LanguageModel, filter: Option<SamplingParams> },
    /// Average over `trials` draws, trial `t` seeded with `mix_seed([seed, t])`.
    MonteCarlo { sampler: &'a SequenceSampler<'a>, trials: usize, seed: u64 },
}

pub fn expected_gold_reward(mode: GoldMode<'_>, prompt: &[TokenId], reward: &TerminalReward) -> Result<Estimate> {
    match mode {
        GoldMode::Exact { model, filter } => {
            let ys = enumerate_responses(model, prompt, filter.as_ref(), ENUMERATION_LIMIT)?;
            Ok(Estimate::exact(ys.iter().map(|(y, lp)| lp.exp() * reward.evaluate(prompt, y)).sum()))
        }
        GoldMode::MonteCarlo { sampler, trials, seed } => {
            let ys = sample_many(sampler, trials, seed)?;
            let rs: Vec<f64> = ys.iter().map(|y| reward.evaluate(prompt, y)).collect();
            Ok(Estimate::from_samples(&rs))
        }
    }
}

/// `trials` draws in trial order, run in parallel.
pub fn sample_many(sampler: &SequenceSampler<'_>, trials: usize, seed: u64) -> Result<Vec<TokenSeq>> {
    (0..trials).into_par_iter().map(|t| sampler(mix_seed(&[seed, t as u64]))).collect()
}

/// Empirical frequencies.
pub fn empirical_distribution(samples: &[TokenSeq]) -> BTreeMap<TokenSeq, f64> {
    let mut counts: BTreeMap<TokenSeq, f64> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.clone()).or_default() += 1.0;
    }
    let n = samples.len() as f64;
    counts.values_mut().for_each(|c| *c /= n);
    counts
}

/// Total variation between an empirical sample and an exact distribution.
pub fn total_variation(samples: &[TokenSeq], exact: &[(TokenSeq, f64)]) -> f64 {
    let emp = empirical_distribution(samples);
    let mut tv = 0.0;
    for (y, lp) in exact {
        tv += (emp.get(y).copied().unwrap_or(0.0) - lp.exp()).abs();
    }
    let known: std::collections::BTreeSet<&TokenSeq> = exact.iter().map(|(y, _)| y).collect();
    tv += emp.iter().filter(|(y, _)| !known.contains(y)).map(|(_, p)| p).sum::<f64>();
    tv / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    /// `None` when some output has zero base probability (infinite KL).
    pub kl: Option<f64>,
    pub trials: usize,
    pub outside_support: usize,
}

/// `KL(empirical ‖ exact base)` over complete sequences. Cells of the base
/// support never drawn get mass `ε = 1/(10·trials)` before renormalizing.
pub fn induced_kl(samples: &[TokenSeq], base_exact: &[(TokenSeq, f64)]) -> KlEstimate {
    let trials = samples.len();
    let eps = 1.0 / (10.0 * trials as f64);
    let counts = empirical_distribution(samples);
    let outside_support = samples.iter().filter(|y| !base_exact.iter().any(|(b, _)| b == *y)).count();
    if outside_support > 0 {
        return KlEstimate { kl: None, trials, outside_support };
    }
    let smoothed: Vec<f64> = base_exact.iter().map(|(y, _)| counts.get(y).copied().unwrap_or(eps)).collect();
    let total: f64 = smoothed.iter().sum();
    let kl = smoothed
        .iter()
        .zip(base_exact)
        .map(|(q, (_, lp))| {
            let q = q / total;
            q * (q.ln() - lp)
        })
        .sum();
    KlEstimate { kl: Some(kl), trials, outside_support }
}

pub fn estimate_induced_kl(
    sampler: &SequenceSampler<'_>,
    base: &dyn LanguageModel,
    prompt: &[TokenId],
    filter: &SamplingParams,
    trials: usize,
    seed: u64,
) -> Result<KlEstimate> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let exact = enumerate_responses(base, prompt, Some(filter), ENUMERATION_LIMIT)?;
    let samples = sample_many(sampler, trials, seed)?;
    Ok(induced_kl(&samples, &exact))
}

/// One-sided paired bootstrap: the fraction of resampled mean differences
/// `mean(a - b)` at or below zero, ties counted half. Small p supports a > b.
pub fn bootstrap_p_value(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.is_empty() || resamples == 0 {
        return Err(Error::InvalidParameter("bootstrap needs equal, non-empty samples and >= 1 resample".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let observed = d.iter().sum::<f64>() / n as f64;
    let mut rng = rng_from_seed(seed);
    let mut below = 0.0;
    for _ in 0..resamples {
        let mut s = 0.0;
        for _ in 0..n {
            s += d[rng.random_range(0..n)];
        }
        let m = s / n as f64;
        if m < 0.0 {
            below += 1.0;
        } else if m == 0.0 {
            below += 0.5;
        }
    }
    Ok((observed, below / resamples as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub label: String,
    pub method: Method,
    pub gold: Option<Estimate>,
    pub guidance_score: Option<Estimate>,
    pub mean_sampled_tokens: f64,
    pub errors: usize,
    pub kl: Option<KlEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub better: String,
    pub worse: String,
    /// `gold_reward` or `guidance_score`.
    pub metric: String,
    pub mean_difference: f64,
    pub p_value: f64,
    pub prompts: usize,
    pub resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub task: String,
    pub seed: u64,
    pub prompts: usize,
    pub budget_override: bool,
    pub fairness_notes: Vec<String>,
    pub methods: Vec<MethodSummary>,
    pub tests: Vec<PairwiseTest>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn test(&self, better: &str, worse: &str) -> Option<&PairwiseTest> {
        self.tests.iter().find(|t| t.better == better && t.worse == worse)
    }

    pub fn summary(&self, label: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.label == label)
    }
}

/// Enforces N = W·K between every best-of-N and CBS method pair. Mismatches
/// are errors unless `budget_override` is set, in which case they are noted.
pub fn fairness_notes(methods: &[Method], budget_override: bool) -> Result<Vec<String>> {
    let mut notes = Vec::new();
    for a in methods.iter().filter(|m| matches!(m, Method::Bon { .. })) {
        for b in methods.iter().filter(|m| matches!(m, Method::Cbs { .. })) {
            if a.sample_budget() != b.sample_budget() {
                let msg = format!("{} vs {}: N != W*K", a.label(), b.label());
                if !budget_override {
                    return Err(Error::Config(format!("{msg}; set budget_override to compare anyway")));
                }
                notes.push(format!("{msg} (override)"));
            }
        }
    }
    Ok(notes)
}

fn metric(records: &[RunRecord], gold: bool) -> Vec<Option<f64>> {
    records
        .iter()
        .map(|r| if r.error.is_some() { None } else if gold { r.gold_reward } else { r.guidance_score })
        .collect()
}

fn summarize(method: &Method, records: &[RunRecord]) -> MethodSummary {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let gold: Vec<f64> = ok.iter().filter_map(|r| r.gold_reward).collect();
    let score: Vec<f64> = ok.iter().filter_map(|r| r.guidance_score).collect();
    MethodSummary {
        label: method.label(),
        method: method.clone(),
        gold: (!gold.is_empty()).then(|| Estimate::from_samples(&gold)),
        guidance_score: (!score.is_empty()).then(|| Estimate::from_samples(&score)),
        mean_sampled_tokens: ok.iter().map(|r| r.sampled_tokens as f64).sum::<f64>() / ok.len().max(1) as f64,
        errors: records.len() - ok.len(),
        kl: None,
    }
}

/// Runs every method of the task on the same prompts and seeds, then tests
/// each CBS method against every base and best-of-N method.
pub fn compare_methods(spec: &TaskSpec, ctx: &RunContext) -> Result<(ComparisonReport, Vec<Vec<RunRecord>>)> {
    let methods = spec.methods();
    let notes = fairness_notes(&methods, spec.budget_override)?;
    let res = Resources::resolve(spec, ctx)?;
    let runs: Vec<Vec<RunRecord>> = methods.iter().map(|m| run_method_records(spec, &res, m, ctx)).collect::<Result<_>>()?;
    let mut summaries: Vec<MethodSummary> = methods.iter().zip(&runs).map(|(m, r)| summarize(m, r)).collect();

    if let (Some(trials), Some(lm), Some(prompt)) = (spec.kl_trials, res.base_lm.as_deref(), res.prompts.first()) {
        if let Some(x) = &prompt.tokens {
            for (s, m) in summaries.iter_mut().zip(&methods) {
                let sampler = |seed: u64| -> Result<TokenSeq> {
                    Ok(run_method(&res, m, prompt, &spec.sampling.with_seed(seed), spec.max_tokens)?.response.tokens)
                };
                s.kl = Some(estimate_induced_kl(&sampler, lm, x, &spec.sampling, trials, prompt_seed(spec.seed, usize::MAX))?);
            }
        }
    }

    let use_gold = res.gold.is_some();
    let mut tests = Vec::new();
    for (i, a) in methods.iter().enumerate() {
        if !matches!(a, Method::Cbs { .. }) {
            continue;
        }
        for (j, b) in methods.iter().enumerate() {
            if !matches!(b, Method::Base | Method::Bon { .. }) {
                continue;
            }
            let (xa, xb) = (metric(&runs[i], use_gold), metric(&runs[j], use_gold));
            let (va, vb): (Vec<f64>, Vec<f64>) = xa.iter().zip(&xb).filter_map(|(p, q)| Some(((*p)?, (*q)?))).unzip();
            if va.is_empty() {
                continue;
            }
            let seed = mix_seed(&[spec.seed, i as u64, j as u64]);
            let (diff, p) = bootstrap_p_value(&va, &vb, spec.bootstrap_resamples, seed)?;
            tests.push(PairwiseTest {
                better: a.label(),
                worse: b.label(),
                metric: if use_gold { "gold_reward" } else { "guidance_score" }.into(),
                mean_difference: diff,
                p_value: p,
                prompts: va.len(),
                resamples: spec.bootstrap_resamples,
            });
        }
    }

    let report = ComparisonReport {
        task: spec.name.clone(),
        seed: spec.seed,
        prompts: res.prompts.len(),
        budget_override: spec.budget_override,
        fairness_notes: notes,
        methods: summaries,
        tests,
    };
    Ok((report, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_of_constant_has_zero_error() {
        let e = Estimate::from_samples(&[2.0; 10]);
        assert_eq!((e.mean, e.std_err, e.n), (2.0, 0.0, 10));
    }

    #[test]
    fn identical_samples_give_half() {
        let a: Vec<f64> = (0..50).map(|i| (i % 4) as f64).collect();
        let (d, p) = bootstrap_p_value(&a, &a, 10_000, 1).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(p, 0.5);
    }

    #[test]
    fn clear_difference_is_significant() {
        let a: Vec<f64> = (0..200).map(|i| 1.0 + (i % 3) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..200).map(|i| (i % 5) as f64 * 0.1).collect();
        let (_, p) = bootstrap_p_value(&a, &b, 2000, 3).unwrap();
        assert!(p < 0.01);
        let (_, p) = bootstrap_p_value(&b, &a, 2000, 3).unwrap();
        assert!(p > 0.99);
    }

    #[test]
    fn kl_of_exact_frequencies_is_zero() {
        let exact = vec![(TokenSeq(vec![0, 2]), 0.25f64.ln()), (TokenSeq(vec![1, 2]), 0.75f64.ln())];
        let samples: Vec<TokenSeq> = (0..4).map(|i| if i == 0 { exact[0].0.clone() } else { exact[1].0.clone() }).collect();
        let k = induced_kl(&samples, &exact);
        assert!(k.kl.unwrap().abs() < 1e-12);
        assert_eq!(total_variation(&samples, &exact), 0.0);
    }

    #[test]
    fn kl_smooths_empty_cells_and_flags_unsupported_outputs() {
        let exact = vec![(TokenSeq(vec![0, 2]), 0.5f64.ln()), (TokenSeq(vec![1, 2]), 0.5f64.ln())];
        let samples = vec![exact[0].0.clone(); 10];
        let eps = 1.0 / 100.0;
        let (q1, q2): (f64, f64) = (1.0 / (1.0 + eps), eps / (1.0 + eps));
        let oracle = q1 * (q1 / 0.5).ln() + q2 * (q2 / 0.5).ln();
        assert!((induced_kl(&samples, &exact).kl.unwrap() - oracle).abs() < 1e-12);
        let bad = vec![TokenSeq(vec![2])];
        assert_eq!(induced_kl(&bad, &exact).kl, None);
        assert_eq!(total_variation(&bad, &exact), 1.0);
    }

    #[test]
    fn fairness_rule() {
        let bon = Method::Bon { n: 8 };
        let cbs = Method::Cbs { beam_width: 4, successors: 4, chunk_length: crate::search::ChunkLength::Tokens(2) };
        assert!(fairness_notes(&[bon.clone(), cbs.clone()], false).is_err());
        assert_eq!(fairness_notes(&[bon, cbs.clone()], true).unwrap().len(), 1);
        assert!(fairness_notes(&[Method::Bon { n: 16 }, cbs], false).unwrap().is_empty());
    }
}
