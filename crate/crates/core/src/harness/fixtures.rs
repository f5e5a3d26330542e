//! Bundled tabular instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::sampling::mix_seed;
use crate::soft::{solve, SoftMDPSpec, TerminalReward, ValueTables};
use crate::tabular::TabularLM;
use crate::tokens::{TokenId, TokenSeq, Vocab};

pub const W2S_HORIZON: usize = 4;
pub const W2S_BETA: f64 = 1.0;

const NEG_INF: f64 = f64::NEG_INFINITY;

pub fn abc_vocab() -> Vocab {
    Vocab::with_eos(["a", "b", "c"]).expect("static vocabulary")
}

/// The weak-to-strong instance: a mildly a-averse reference, a gold reward of
/// +1 per `a`, the soft-optimal tuned policy at β = 1, and a different base
/// model whose expected gold reward sits between the two.
#[derive(Debug, Clone)]
pub struct WeakToStrong {
    pub vocab: Vocab,
    pub reference: TabularLM,
    pub tuned: TabularLM,
    pub base: TabularLM,
    pub reward: TerminalReward,
    pub beta: f64,
    pub horizon: usize,
}

impl WeakToStrong {
    pub fn build() -> Result<Self> {
        let vocab = abc_vocab();
        let reference = TabularLM::new(vocab.clone(), 1, W2S_HORIZON)?
            .with_default(vec![-0.3, 0.0, 0.0, -0.6])?
            .with_row(&[0], vec![-0.4, 0.1, 0.0, -0.6])?
            .with_row(&[1], vec![-0.3, 0.0, 0.1, -0.6])?
            .with_row(&[2], vec![-0.3, 0.1, 0.0, -0.6])?;
        let base = TabularLM::new(vocab.clone(), 1, W2S_HORIZON)?
            .with_default(vec![0.2, 0.0, 0.0, -0.9])?
            .with_row(&[0], vec![0.3, -0.1, 0.0, -0.9])?
            .with_row(&[1], vec![0.1, 0.0, -0.2, -0.9])?
            .with_row(&[2], vec![0.2, -0.2, 0.1, -0.9])?;
        let reward = TerminalReward::count_symbol(0, 1.0);

        // one full-context table covering every single-symbol prompt
        let mut tuned = TabularLM::new(vocab.clone(), 1 + W2S_HORIZON, W2S_HORIZON)?;
        for p in 0..3 {
            let spec = SoftMDPSpec::new(&reference, reward.clone(), W2S_BETA, TokenSeq(vec![p]), W2S_HORIZON)?;
            let (_, pi) = solve(&spec)?;
            tuned.merge_rows(&pi)?;
        }
        Ok(Self { vocab, reference, tuned, base, reward, beta: W2S_BETA, horizon: W2S_HORIZON })
    }

    pub fn spec(&self, prompt: &[TokenId]) -> Result<SoftMDPSpec> {
        SoftMDPSpec::new(&self.reference, self.reward.clone(), self.beta, TokenSeq::from(prompt), self.horizon)
    }

    /// Prompt `i` of the seeded prompt set: `a, b, c, a, ...`.
    pub fn prompt(i: usize) -> TokenSeq {
        TokenSeq(vec![(i % 3) as TokenId])
    }
}

/// Order-0 uniform model over `a, b, c` with EOS masked until the forced stop:
/// exactly 27 complete responses, each of three symbols then EOS.
pub fn uniform27() -> Result<TabularLM> {
    TabularLM::new(abc_vocab(), 0, 4)?.with_default(vec![0.0, 0.0, 0.0, NEG_INF])
}

/// A 27-sequence instance with a non-uniform order-1 reference, a seeded random
/// reward and its soft-optimal policy.
#[derive(Debug, Clone)]
pub struct Instance27 {
    pub reference: TabularLM,
    pub reward: TerminalReward,
    pub spec: SoftMDPSpec,
    pub tables: ValueTables,
    pub tuned: TabularLM,
}

impl Instance27 {
    pub fn build(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reference = TabularLM::new(abc_vocab(), 1, 4)?;
        let row = |rng: &mut ChaCha8Rng| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), NEG_INF];
        reference = reference.with_default(row(&mut rng))?;
        for c in 0..3 {
            reference.set_row(&[c], row(&mut rng))?;
        }
        let reward = hashed_reward(seed, 1.5);
        let spec = SoftMDPSpec::new(&reference, reward.clone(), 1.0, TokenSeq::new(), 4)?;
        let (tables, tuned) = solve(&spec)?;
        Ok(Self { reference, reward, spec, tables, tuned })
    }
}

/// A reward that is a fixed pseudo-random function of `(prompt, response)`,
/// uniform in `[-scale, scale)`.
pub fn hashed_reward(seed: u64, scale: f64) -> TerminalReward {
    TerminalReward::new(move |x, y| {
        let mut parts = vec![seed, x.len() as u64];
        parts.extend(x.iter().chain(y).map(|&t| t as u64));
        let u = (mix_seed(&parts) >> 11) as f64 / (1u64 << 53) as f64;
        scale * (2.0 * u - 1.0)
    })
}

/// A seeded random tabular MDP.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub reference: TabularLM,
    pub reward: TerminalReward,
    pub beta: f64,
    pub prompt: TokenSeq,
    pub horizon: usize,
}

impl RandomInstance {
    /// `vocab_size` counts EOS. Reference rows are order 1 or 2, logits uniform
    /// in `[-2, 2)`, with an occasional masked non-EOS entry.
    pub fn generate(seed: u64, vocab_size: usize, horizon: usize, beta: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let symbols: Vec<String> = (0..vocab_size - 1).map(|i| ((b'a' + i as u8) as char).to_string()).collect();
        let vocab = Vocab::with_eos(symbols)?;
        let eos = vocab.eos_id() as usize;
        let order = rng.random_range(1..=2usize);
        let n = vocab_size;
        let random_row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut row: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let masked = rng.random_range(0..n);
            if masked != eos && rng.random_bool(0.2) {
                row[masked] = NEG_INF;
            }
            row
        };
        let mut reference = TabularLM::new(vocab, order, horizon)?.with_default(random_row(&mut rng))?;
        let content: Vec<TokenId> = (0..(n - 1) as TokenId).collect();
        for &a in &content {
            reference.set_row(&[a], random_row(&mut rng))?;
            if order == 2 {
                for &b in &content {
                    reference.set_row(&[a, b], random_row(&mut rng))?;
                }
            }
        }
        let prompt_len = rng.random_range(0..=2usize);
        let prompt = TokenSeq((0..prompt_len).map(|_| rng.random_range(0..(n - 1) as TokenId)).collect());
        let reward = hashed_reward(mix_seed(&[seed, 0xfeed]), 2.0);
        Ok(Self { reference, reward, beta, prompt, horizon })
    }

    pub fn spec(&self) -> Result<SoftMDPSpec> {
        SoftMDPSpec::new(&self.reference, self.reward.clone(), self.beta, self.prompt.clone(), self.horizon)
    }
}

/// Looks up a bundled model by name.
pub fn builtin_model(name: &str) -> Result<TabularLM> {
    use crate::error::Error;
    Ok(match name {
        "w2s-ref" => WeakToStrong::build()?.reference,
        "w2s-tuned" => WeakToStrong::build()?.tuned,
        "w2s-base" => WeakToStrong::build()?.base,
        "uniform27" => uniform27()?,
        other => {
            return Err(Error::Config(format!(
                "unknown builtin model {other:?} (known: w2s-ref, w2s-tuned, w2s-base, uniform27)"
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::enumerate_responses;

    fn expected_reward(model: &TabularLM, prompt: &[TokenId], reward: &TerminalReward) -> f64 {
        enumerate_responses(model, prompt, None, 10_000)
            .unwrap()
            .iter()
            .map(|(y, lp)| lp.exp() * reward.evaluate(prompt, y))
            .sum()
    }

    #[test]
    fn base_sits_between_reference_and_tuned() {
        let f = WeakToStrong::build().unwrap();
        for p in 0..3 {
            let x = [p];
            let r = expected_reward(&f.reference, &x, &f.reward);
            let b = expected_reward(&f.base, &x, &f.reward);
            let t = expected_reward(&f.tuned, &x, &f.reward);
            assert!(r < b && b < t, "prompt {p}: {r} {b} {t}");
        }
    }

    #[test]
    fn reference_is_a_averse() {
        let f = WeakToStrong::build().unwrap();
        for p in 0..3 {
            let lp = crate::tabular::LanguageModel::next_token_logprobs(&f.reference, &[p], &[]).unwrap();
            assert!(lp[0] < lp[1].max(lp[2]));
        }
    }

    #[test]
    fn uniform27_has_27_sequences() {
        let m = uniform27().unwrap();
        let ys = enumerate_responses(&m, &[], None, 100).unwrap();
        assert_eq!(ys.len(), 27);
        for (y, lp) in ys {
            assert_eq!(y.len(), 4);
            assert!((lp - (1.0f64 / 27.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn instance27_has_27_sequences() {
        let inst = Instance27::build(3).unwrap();
        assert_eq!(enumerate_responses(&inst.tuned, &[], None, 100).unwrap().len(), 27);
    }

    #[test]
    fn random_instances_are_reproducible() {
        let a = RandomInstance::generate(9, 5, 6, 1.0).unwrap();
        let b = RandomInstance::generate(9, 5, 6, 1.0).unwrap();
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.prompt, b.prompt);
        assert_eq!(a.reward.evaluate(&a.prompt, &[0, 4]), b.reward.evaluate(&b.prompt, &[0, 4]));
    }
}
