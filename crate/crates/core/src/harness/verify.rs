//! Invariant checks over bundled fixtures.

use serde::{Deserialize, Serialize};

use super::fixtures::{Instance27, RandomInstance, WeakToStrong};
use crate::error::Result;
use crate::guidance::{eft_compose, guidance_score, GuidancePair};
use crate::sampling::SamplingParams;
use crate::search::{best_of_n, cbs, token_beam_search, ChunkLength, Prompt, SearchConfig, DEFAULT_BRANCH_BUDGET};
use crate::soft::{soft_value_iteration, verify_duality, verify_value_identity, SoftMDPSpec};
use crate::tabular::{enumerate_responses, LanguageModel, TabularLM};

pub const NUMERIC_TOLERANCE: f64 = 1e-9;
pub const EFT_TOLERANCE: f64 = 1e-12;

/// An MDP, a claimed optimal policy for it, and a base model to search with.
#[derive(Debug, Clone)]
pub struct VerifyFixture {
    pub name: String,
    pub spec: SoftMDPSpec,
    pub tuned: TabularLM,
    pub base: TabularLM,
}

impl VerifyFixture {
    /// Solves `spec` for the tuned policy.
    pub fn solved(name: impl Into<String>, spec: SoftMDPSpec, base: TabularLM) -> Result<Self> {
        let tables = soft_value_iteration(&spec)?;
        let tuned = crate::soft::optimal_policy(&tables, &spec)?;
        Ok(Self { name: name.into(), spec, tuned, base })
    }
}

pub fn bundled_fixtures() -> Result<Vec<VerifyFixture>> {
    let w2s = WeakToStrong::build()?;
    let i27 = Instance27::build(27)?;
    let rnd = RandomInstance::generate(11, 4, 4, 0.5)?;
    let rnd_base = RandomInstance::generate(12, 4, 4, 0.5)?.reference;
    Ok(vec![
        VerifyFixture { name: "weak-to-strong".into(), spec: w2s.spec(&[0])?, tuned: w2s.tuned.clone(), base: w2s.base.clone() },
        VerifyFixture { name: "instance27".into(), spec: i27.spec.clone(), tuned: i27.tuned.clone(), base: i27.reference.clone() },
        VerifyFixture::solved("random", rnd.spec()?, rnd_base.with_horizon_cap(4)?)?,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub fixture: String,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn numeric(name: &str, fixture: &str, err: Result<f64>, tol: f64) -> Check {
    match err {
        Ok(e) => Check { name: name.into(), fixture: fixture.into(), passed: e <= tol, max_error: e, tolerance: tol, detail: String::new() },
        Err(e) => Check { name: name.into(), fixture: fixture.into(), passed: false, max_error: f64::INFINITY, tolerance: tol, detail: e.to_string() },
    }
}

fn flag(name: &str, fixture: &str, ok: Result<bool>, detail: &str) -> Check {
    let (passed, detail) = match ok {
        Ok(p) => (p, if p { String::new() } else { detail.to_string() }),
        Err(e) => (false, e.to_string()),
    };
    Check { name: name.into(), fixture: fixture.into(), passed, max_error: if passed { 0.0 } else { f64::INFINITY }, tolerance: 0.0, detail }
}

/// Bitwise: scoring a whole response equals an explicit left-to-right sum of
/// per-token log-ratios, and equals extending the score of any prefix.
fn telescoping(pair: &GuidancePair, f: &VerifyFixture) -> Result<bool> {
    let x = f.spec.prompt();
    for (y, _) in enumerate_responses(f.spec.reference(), x, None, 1_000_000)? {
        let whole = guidance_score(pair, x, &y)?;
        let mut manual = 0.0;
        for t in 0..y.len() {
            let a = f.tuned.next_token_logprobs(x, &y[..t])?[y[t] as usize];
            let b = f.spec.reference().next_token_logprobs(x, &y[..t])?[y[t] as usize];
            manual += a - b;
        }
        if whole.0.to_bits() != manual.to_bits() {
            return Ok(false);
        }
        for split in 0..=y.len() {
            let head = guidance_score(pair, x, &y[..split])?;
            let ext = pair.extend_score(x, &y[..split], head, &y[split..])?;
            if ext.0.to_bits() != whole.0.to_bits() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn special_cases(pair: &GuidancePair, f: &VerifyFixture, seed: u64) -> Result<bool> {
    let x = f.spec.prompt();
    let prompt = Prompt::from_tokens(f.base.vocab(), x.clone())?;
    let max = f.spec.horizon();
    let sampling = SamplingParams::unfiltered(seed);
    for n in [1, 4, 16] {
        let bon = best_of_n(&f.base, pair, &prompt, n, &sampling, max)?;
        let c = cbs(&f.base, pair, &prompt, &SearchConfig::new(1, n, ChunkLength::Infinite, max).with_sampling(sampling.clone()))?;
        if serde_json::to_string(&bon.best)? != serde_json::to_string(&c.best)? {
            return Ok(false);
        }
    }
    for w in [1, 2, 4] {
        let tb = token_beam_search(&f.base, pair, x, w, max, &sampling, DEFAULT_BRANCH_BUDGET)?;
        let c = cbs(&f.base, pair, &prompt, &SearchConfig::exhaustive(w, max).with_sampling(sampling.clone()))?;
        if serde_json::to_string(&tb)? != serde_json::to_string(&c.best)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Max per-entry gap between `softmax(eft(untuned, tuned, untuned, 1))` and
/// `softmax(tuned)` over every reachable state.
fn eft_identity(f: &VerifyFixture) -> Result<f64> {
    let x = f.spec.prompt();
    let reference = f.spec.reference();
    let tables = soft_value_iteration(&f.spec)?;
    let mut worst: f64 = 0.0;
    for s in tables.states() {
        let lu = reference.next_token_logprobs(x, s)?;
        let lt = f.tuned.next_token_logprobs(x, s)?;
        let composed = eft_compose(&lu, &lt, &lu, 1.0)?.softmax();
        for (c, t) in composed.iter().zip(lt.iter().map(|v| v.exp())) {
            worst = worst.max((c - t).abs());
        }
    }
    Ok(worst)
}

/// Runs every check on every fixture. `seed` only drives the sampled
/// special-case comparisons.
pub fn verify(fixtures: &[VerifyFixture], seed: u64) -> VerifyReport {
    let mut report = VerifyReport::default();
    for f in fixtures {
        let name = f.name.as_str();
        let tables = match soft_value_iteration(&f.spec) {
            Ok(t) => t,
            Err(e) => {
                report.checks.push(flag("value_iteration", name, Err(e), ""));
                continue;
            }
        };
        report.checks.push(numeric("duality", name, verify_duality(&f.spec, &tables, &f.tuned), NUMERIC_TOLERANCE));
        report
            .checks
            .push(numeric("value_identity", name, verify_value_identity(&f.spec, &tables, &f.tuned), NUMERIC_TOLERANCE));
        report.checks.push(numeric(
            "log_z_recursion",
            name,
            Ok((tables.log_z() - tables.log_z_recursive()).abs()),
            NUMERIC_TOLERANCE,
        ));
        match GuidancePair::from_models(f.tuned.clone(), f.spec.reference().clone()) {
            Ok(pair) => {
                report.checks.push(flag("telescoping", name, telescoping(&pair, f), "log-ratio sum differs bitwise"));
                report.checks.push(flag("special_cases", name, special_cases(&pair, f, seed), "equivalent searches diverged"));
            }
            Err(e) => report.checks.push(flag("guidance_pair", name, Err(e), "")),
        }
        report.checks.push(numeric("eft_identity", name, eft_identity(f), EFT_TOLERANCE));
    }
    report
}

/// Copy of `fixture` with one tuned row shifted by `delta` on its first
/// finite entry.
pub fn perturbed(fixture: &VerifyFixture, delta: f64) -> Result<VerifyFixture> {
    let mut out = fixture.clone();
    let (ctx, row) = fixture.tuned.rows().next().map(|(c, r)| (c.to_vec(), r.values().to_vec())).ok_or_else(|| {
        crate::error::Error::InvalidParameter("fixture has no rows to perturb".into())
    })?;
    let mut row = row;
    if let Some(v) = row.iter_mut().find(|v| v.is_finite()) {
        *v += delta;
    }
    out.tuned.set_row(&ctx, row)?;
    out.name = format!("{}+perturbed", fixture.name);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_fixtures_pass() {
        let report = verify(&bundled_fixtures().unwrap(), 0);
        assert!(report.all_passed(), "{:?}", report.failures().collect::<Vec<_>>());
        assert_eq!(report.checks.len(), 3 * 6);
    }

    #[test]
    fn perturbed_row_fails_duality() {
        let f = perturbed(&bundled_fixtures().unwrap()[0], 0.3).unwrap();
        let report = verify(&[f], 0);
        let duality = report.checks.iter().find(|c| c.name == "duality").unwrap();
        assert!(!duality.passed);
        assert!(duality.max_error > 1e-3);
        assert!(!report.all_passed());
    }

    #[test]
    fn seed_does_not_change_deterministic_checks() {
        let fx = bundled_fixtures().unwrap();
        let a = verify(&fx, 1);
        let b = verify(&fx, 99);
        assert_eq!(a, b);
    }
}
