//! Logit vectors, sampling filters, inverse-CDF draws and seed derivation.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unnormalized natural-log scores, one per vocabulary entry.
///
/// Entries may be `-inf` (masked) but never NaN or `+inf`, and at least one
/// entry is finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::InvalidLogits("NaN or +inf entry".into()));
        }
        if !values.iter().any(|v| v.is_finite()) {
            return Err(Error::InvalidLogits("no finite entry".into()));
        }
        Ok(Self(values))
    }

    /// All mass on `index`.
    pub fn point_mass(len: usize, index: usize) -> Self {
        let mut v = vec![f64::NEG_INFINITY; len];
        v[index] = 0.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn log_softmax(&self) -> Vec<f64> {
        log_softmax(&self.0)
    }

    pub fn softmax(&self) -> Vec<f64> {
        self.log_softmax().into_iter().map(f64::exp).collect()
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(v: LogitVector) -> Self {
        v.0
    }
}

/// `log Σ exp(x)` with max subtraction. Returns `-inf` when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn log_softmax(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| v - lse).collect()
}

/// How many of the highest-scoring entries survive the top-k filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopK {
    All,
    Keep(usize),
}

impl Serialize for TopK {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TopK::All => s.serialize_str("all"),
            TopK::Keep(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for TopK {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(k) => Ok(TopK::Keep(k as usize)),
            Raw::S(s) if s == "all" => Ok(TopK::All),
            Raw::S(s) => Err(serde::de::Error::custom(format!("top_k must be an integer or \"all\", got {s:?}"))),
        }
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::All => f.write_str("all"),
            TopK::Keep(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: TopK,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for SamplingParams {
    /// T = 0.7, top-k = 50, top-p = 1.0.
    fn default() -> Self {
        Self { temperature: 0.7, top_k: TopK::Keep(50), top_p: 1.0, seed: 0 }
    }
}

impl SamplingParams {
    /// Plain softmax sampling: no temperature, no truncation.
    pub fn unfiltered(seed: u64) -> Self {
        Self { temperature: 1.0, top_k: TopK::All, top_p: 1.0, seed }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::InvalidParameter(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidParameter(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.top_k == TopK::Keep(0) {
            return Err(Error::InvalidParameter("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// A normalized probability vector over vocabulary indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(i, _)| i)
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.0.get(index).copied().unwrap_or(0.0)
    }
}

/// Temperature, then top-k (ties to the lower index), then top-p over the kept
/// entries, then renormalization.
pub fn apply_sampling_filters(logits: &LogitVector, params: &SamplingParams) -> Distribution {
    let scaled: Vec<f64> = logits.values().iter().map(|v| v / params.temperature).collect();

    let mut order: Vec<usize> = (0..scaled.len()).filter(|&i| scaled[i].is_finite()).collect();
    // stable: equal values keep ascending index order
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]));
    if let TopK::Keep(k) = params.top_k {
        order.truncate(k.max(1));
    }

    let kept: Vec<f64> = order.iter().map(|&i| scaled[i]).collect();
    let lse = log_sum_exp(&kept);
    let kept_probs: Vec<f64> = kept.iter().map(|v| (v - lse).exp()).collect();

    let mut cut = kept_probs.len();
    if params.top_p < 1.0 {
        let mut mass = 0.0;
        for (n, p) in kept_probs.iter().enumerate() {
            mass += p;
            if mass >= params.top_p {
                cut = n + 1;
                break;
            }
        }
    }

    let total: f64 = kept_probs[..cut].iter().sum();
    let mut probs = vec![0.0; scaled.len()];
    for (&i, &p) in order[..cut].iter().zip(&kept_probs[..cut]) {
        probs[i] = p / total;
    }
    Distribution(probs)
}

/// Inverse-CDF draw over indices in ascending order.
pub fn draw<R: Rng + ?Sized>(dist: &Distribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in dist.0.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i;
        }
    }
    last
}

pub type SlotRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SlotRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of words into one seed. Stable across platforms and releases.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed for one search slot: `(run_seed, round, parent_slot, sample_index)`.
pub fn slot_seed(run_seed: u64, round: usize, parent_slot: usize, sample_index: usize) -> u64 {
    mix_seed(&[run_seed, round as u64, parent_slot as u64, sample_index as u64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn identity_filter_is_softmax() {
        let l = lv(&[0.3, -1.2, 2.0, 0.0]);
        let d = apply_sampling_filters(&l, &SamplingParams::unfiltered(0));
        for (a, b) in d.probs().iter().zip(l.softmax()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn top_k_one_breaks_ties_low() {
        let l = lv(&[0.0, 0.0, f64::NEG_INFINITY]);
        let p = SamplingParams { top_k: TopK::Keep(1), ..SamplingParams::unfiltered(0) };
        assert_eq!(apply_sampling_filters(&l, &p).probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn top_p_keeps_smallest_prefix() {
        // probs ∝ [4, 2, 1, 1] / 8 ⇒ [0.5, 0.25, 0.125, 0.125]
        let l = lv(&[4f64.ln(), 2f64.ln(), 0.0, 0.0]);
        let p = SamplingParams { top_p: 0.75, ..SamplingParams::unfiltered(0) };
        let d = apply_sampling_filters(&l, &p);
        assert!((d.prob(0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.prob(1) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(d.prob(2), 0.0);
    }

    #[test]
    fn defaults_match_engine_preset() {
        let p = SamplingParams::default();
        assert_eq!(p.temperature, 0.7);
        assert_eq!(p.top_k, TopK::Keep(50));
        assert_eq!(p.top_p, 1.0);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn validation_rejects_bad_params() {
        let base = SamplingParams::default();
        assert!(SamplingParams { temperature: 0.0, ..base.clone() }.validate().is_err());
        assert!(SamplingParams { top_p: 0.0, ..base.clone() }.validate().is_err());
        assert!(SamplingParams { top_p: 1.5, ..base.clone() }.validate().is_err());
        assert!(SamplingParams { top_k: TopK::Keep(0), ..base }.validate().is_err());
    }

    #[test]
    fn logit_vector_rejects_all_masked() {
        assert!(LogitVector::new(vec![f64::NEG_INFINITY; 3]).is_err());
        assert!(LogitVector::new(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn point_mass_draw_is_constant() {
        let d = apply_sampling_filters(&LogitVector::point_mass(5, 3), &SamplingParams::default());
        for seed in 0..50 {
            assert_eq!(draw(&d, &mut rng_from_seed(seed)), 3);
        }
    }

    #[test]
    fn uniform_draw_frequencies_within_four_sigma() {
        let d = apply_sampling_filters(&lv(&[0.0; 4]), &SamplingParams::unfiltered(0));
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[draw(&d, &mut rng)] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.25).abs() < 4.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn seeded_replay_is_identical() {
        let d = apply_sampling_filters(&lv(&[0.1, 0.5, -0.3]), &SamplingParams::unfiltered(0));
        let a: Vec<usize> = {
            let mut r = rng_from_seed(42);
            (0..200).map(|_| draw(&d, &mut r)).collect()
        };
        let b: Vec<usize> = {
            let mut r = rng_from_seed(42);
            (0..200).map(|_| draw(&d, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn slot_seeds_differ_per_coordinate() {
        let s = slot_seed(1, 0, 0, 0);
        assert_ne!(s, slot_seed(1, 1, 0, 0));
        assert_ne!(s, slot_seed(1, 0, 1, 0));
        assert_ne!(s, slot_seed(1, 0, 0, 1));
        assert_ne!(s, slot_seed(2, 0, 0, 0));
        assert_eq!(s, slot_seed(1, 0, 0, 0));
    }

    #[test]
    fn top_k_serde_forms() {
        assert_eq!(serde_json::to_string(&TopK::All).unwrap(), "\"all\"");
        assert_eq!(serde_json::from_str::<TopK>("7").unwrap(), TopK::Keep(7));
        assert_eq!(serde_json::from_str::<TopK>("\"all\"").unwrap(), TopK::All);
    }

    fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(prop_oneof![4 => -8.0f64..8.0, 1 => Just(f64::NEG_INFINITY)], 1..12)
            .prop_filter("needs a finite entry", |v| v.iter().any(|x| x.is_finite()))
    }

    proptest! {
        #[test]
        fn filters_normalize_within_support(
            v in logits_strategy(),
            t in 0.05f64..5.0,
            k in 1usize..14,
            p in 0.01f64..=1.0,
        ) {
            let l = lv(&v);
            let params = SamplingParams { temperature: t, top_k: TopK::Keep(k), top_p: p, seed: 0 };
            let d = apply_sampling_filters(&l, &params);
            let sum: f64 = d.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for i in d.support() {
                prop_assert!(v[i].is_finite());
            }
            // argmax always survives
            let best = (0..v.len()).filter(|&i| v[i].is_finite())
                .fold(None::<usize>, |b, i| match b { Some(j) if v[j] >= v[i] => Some(j), _ => Some(i) })
                .unwrap();
            prop_assert!(d.prob(best) > 0.0);
        }

        #[test]
        fn shrinking_truncation_never_grows_support(
            v in logits_strategy(),
            k in 1usize..14,
            p in 0.01f64..=1.0,
            dk in 0usize..5,
            dp in 0.0f64..0.5,
        ) {
            let l = lv(&v);
            let wide = SamplingParams { temperature: 0.7, top_k: TopK::Keep(k + dk), top_p: (p + dp).min(1.0), seed: 0 };
            let narrow = SamplingParams { top_k: TopK::Keep(k), top_p: p, ..wide.clone() };
            let dw = apply_sampling_filters(&l, &wide);
            let dn = apply_sampling_filters(&l, &narrow);
            for i in dn.support() {
                prop_assert!(dw.prob(i) > 0.0);
            }
        }
    }
}
