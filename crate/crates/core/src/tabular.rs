//! Finite-context categorical language models and their plain-text fixture format.
//!
//! A [`TabularLM`] maps the trailing `order` tokens of `prompt ∘ prefix` to a
//! row of logits. Responses are capped at `horizon_cap` tokens: at depth
//! `horizon_cap - 1` every non-EOS entry is masked, so every response is
//! complete after at most `horizon_cap` tokens and the sequence space is finite.
//!
//! Fixture format, one directive per line (`#` starts a comment):
//!
//! ```text
//! vocab a b c <eos>
//! eos <eos>
//! order 1
//! horizon 4
//! default 0 0 0 0
//! row | 0.0 0.0 0.0 -inf
//! row a | -0.5 0.0 0.0 0.2
//! ```
//!
//! `row` lists the context symbols, a `|`, then one logit per vocabulary entry.
//! Symbols may not contain whitespace or `|`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sampling::{apply_sampling_filters, LogitVector, SamplingParams};
use crate::tokens::{TokenId, TokenSeq, Vocab};

/// Anything that can produce next-token logits in-process.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocab;

    /// Logits for the token following `prompt ∘ prefix`. `prefix` must be incomplete.
    fn next_token_logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<LogitVector>;

    fn next_token_logprobs(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.next_token_logits(prompt, prefix)?.log_softmax())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularLM {
    vocab: Vocab,
    order: usize,
    rows: BTreeMap<Vec<TokenId>, LogitVector>,
    default_row: Option<LogitVector>,
    horizon_cap: usize,
}

impl TabularLM {
    pub fn new(vocab: Vocab, order: usize, horizon_cap: usize) -> Result<Self> {
        if horizon_cap == 0 {
            return Err(Error::InvalidParameter("horizon_cap must be >= 1".into()));
        }
        Ok(Self { vocab, order, rows: BTreeMap::new(), default_row: None, horizon_cap })
    }

    /// Order-0 model with all entries equal.
    pub fn uniform(vocab: Vocab, horizon_cap: usize) -> Result<Self> {
        let n = vocab.len();
        Self::new(vocab, 0, horizon_cap)?.with_default(vec![0.0; n])
    }

    pub fn with_default(mut self, logits: Vec<f64>) -> Result<Self> {
        self.default_row = Some(self.checked_row(logits)?);
        Ok(self)
    }

    pub fn with_row(mut self, context: &[TokenId], logits: Vec<f64>) -> Result<Self> {
        self.set_row(context, logits)?;
        Ok(self)
    }

    pub fn set_row(&mut self, context: &[TokenId], logits: Vec<f64>) -> Result<()> {
        if context.len() > self.order {
            return Err(Error::InvalidParameter(format!(
                "context of length {} exceeds order {}",
                context.len(),
                self.order
            )));
        }
        if context.iter().any(|&t| t == self.vocab.eos_id() || t as usize >= self.vocab.len()) {
            return Err(Error::InvalidSequence(format!("bad context {context:?}")));
        }
        let row = self.checked_row(logits)?;
        self.rows.insert(context.to_vec(), row);
        Ok(())
    }

    fn checked_row(&self, logits: Vec<f64>) -> Result<LogitVector> {
        if logits.len() != self.vocab.len() {
            return Err(Error::InvalidLogits(format!(
                "row has {} entries, vocabulary has {}",
                logits.len(),
                self.vocab.len()
            )));
        }
        LogitVector::new(logits)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn horizon_cap(&self) -> usize {
        self.horizon_cap
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[TokenId], &LogitVector)> {
        self.rows.iter().map(|(k, v)| (k.as_slice(), v))
    }

    pub fn default_row(&self) -> Option<&LogitVector> {
        self.default_row.as_ref()
    }

    /// Same table, different response cap.
    pub fn with_horizon_cap(&self, horizon_cap: usize) -> Result<Self> {
        if horizon_cap == 0 {
            return Err(Error::InvalidParameter("horizon_cap must be >= 1".into()));
        }
        Ok(Self { horizon_cap, ..self.clone() })
    }

    /// Copies every row of `other` into `self`, overwriting equal contexts.
    pub fn merge_rows(&mut self, other: &TabularLM) -> Result<()> {
        if other.vocab != self.vocab {
            return Err(Error::VocabMismatch("cannot merge tables over different vocabularies".into()));
        }
        self.order = self.order.max(other.order);
        for (k, v) in &other.rows {
            self.rows.insert(k.clone(), v.clone());
        }
        Ok(())
    }

    fn lookup(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<&LogitVector> {
        let total = prompt.len() + prefix.len();
        let n = self.order.min(total);
        let mut context = Vec::with_capacity(n);
        let skip = total - n;
        context.extend(prompt.iter().chain(prefix).skip(skip).copied());
        self.rows
            .get(&context)
            .or(self.default_row.as_ref())
            .ok_or(Error::MissingContext { context })
    }

    // ── Fixture format ───────────────────────────────────────────────────

    pub fn parse(text: &str) -> Result<Self> {
        let mut symbols: Option<Vec<String>> = None;
        let mut eos: Option<String> = None;
        let mut order: Option<usize> = None;
        let mut horizon: Option<usize> = None;
        let mut default: Option<(usize, Vec<f64>)> = None;
        let mut rows: Vec<(usize, Vec<String>, Vec<f64>)> = Vec::new();

        let err = |line: usize, message: String| Error::Fixture { line, message };
        let parse_logits = |line: usize, fields: &[&str]| -> Result<Vec<f64>> {
            fields
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| err(line, format!("bad logit {f:?}: {e}"))))
                .collect()
        };

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut parts = content.split_whitespace();
            let directive = parts.next().unwrap_or("");
            let rest: Vec<&str> = parts.collect();
            match directive {
                "vocab" => symbols = Some(rest.iter().map(|s| s.to_string()).collect()),
                "eos" => {
                    let [name] = rest.as_slice() else {
                        return Err(err(line, "eos takes exactly one symbol".into()));
                    };
                    eos = Some(name.to_string());
                }
                "order" | "horizon" => {
                    let [n] = rest.as_slice() else {
                        return Err(err(line, format!("{directive} takes one integer")));
                    };
                    let n: usize = n.parse().map_err(|e| err(line, format!("bad integer: {e}")))?;
                    if directive == "order" {
                        order = Some(n);
                    } else {
                        horizon = Some(n);
                    }
                }
                "default" => default = Some((line, parse_logits(line, &rest)?)),
                "row" => {
                    let bar = rest
                        .iter()
                        .position(|s| *s == "|")
                        .ok_or_else(|| err(line, "row needs a '|' separator".into()))?;
                    let ctx = rest[..bar].iter().map(|s| s.to_string()).collect();
                    rows.push((line, ctx, parse_logits(line, &rest[bar + 1..])?));
                }
                other => return Err(err(line, format!("unknown directive {other:?}"))),
            }
        }

        let symbols = symbols.ok_or_else(|| err(0, "missing vocab line".into()))?;
        let eos = eos.ok_or_else(|| err(0, "missing eos line".into()))?;
        let eos_id = symbols
            .iter()
            .position(|s| *s == eos)
            .ok_or_else(|| err(0, format!("eos symbol {eos:?} not in vocab")))?;
        let vocab = Vocab::new(symbols, eos_id as TokenId)?;
        let order = order.ok_or_else(|| err(0, "missing order line".into()))?;
        let horizon = horizon.ok_or_else(|| err(0, "missing horizon line".into()))?;
        let mut model = TabularLM::new(vocab, order, horizon)?;
        if let Some((line, d)) = default {
            model = model.with_default(d).map_err(|e| err(line, e.to_string()))?;
        }
        for (line, ctx, logits) in rows {
            let ids = ctx
                .iter()
                .map(|s| model.vocab.id_of(s).ok_or_else(|| err(line, format!("unknown symbol {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            model.set_row(&ids, logits).map_err(|e| err(line, e.to_string()))?;
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes to the fixture format. `parse(to_fixture(m)) == m`.
    pub fn to_fixture(&self) -> String {
        let mut out = String::new();
        let eos = self.vocab.symbol(self.vocab.eos_id()).unwrap_or("<eos>");
        let _ = writeln!(out, "vocab {}", self.vocab.symbols().join(" "));
        let _ = writeln!(out, "eos {eos}");
        let _ = writeln!(out, "order {}", self.order);
        let _ = writeln!(out, "horizon {}", self.horizon_cap);
        let fmt_row = |v: &LogitVector| v.values().iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        if let Some(d) = &self.default_row {
            let _ = writeln!(out, "default {}", fmt_row(d));
        }
        for (ctx, row) in &self.rows {
            let names: Vec<&str> = ctx.iter().filter_map(|&t| self.vocab.symbol(t)).collect();
            if names.is_empty() {
                let _ = writeln!(out, "row | {}", fmt_row(row));
            } else {
                let _ = writeln!(out, "row {} | {}", names.join(" "), fmt_row(row));
            }
        }
        out
    }
}

impl LanguageModel for TabularLM {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_token_logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<LogitVector> {
        if self.vocab.is_complete(prefix) {
            return Err(Error::InvalidSequence("prefix is already complete".into()));
        }
        if prefix.len() >= self.horizon_cap {
            return Err(Error::InvalidSequence(format!(
                "prefix length {} reaches horizon cap {}",
                prefix.len(),
                self.horizon_cap
            )));
        }
        if prefix.len() + 1 == self.horizon_cap {
            return Ok(LogitVector::point_mass(self.vocab.len(), self.vocab.eos_id() as usize));
        }
        self.lookup(prompt, prefix).cloned()
    }
}

/// `Σ_t log softmax(next_token_logits)(y_t)`, summed left to right.
pub fn sequence_logprob<M: LanguageModel + ?Sized>(model: &M, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
    model.vocab().check(response)?;
    let mut total = 0.0;
    for t in 0..response.len() {
        let lp = model.next_token_logprobs(prompt, &response[..t])?;
        total += lp[response[t] as usize];
    }
    Ok(total)
}

/// Every complete response reachable from `prompt`, with its log-probability.
///
/// With `filter = None` the raw model distribution is enumerated; otherwise the
/// per-step distribution after sampling filters. Responses come out in
/// depth-first, ascending-token order. Fails once more than `limit`
/// sequences would be produced.
pub fn enumerate_responses<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    filter: Option<&SamplingParams>,
    limit: usize,
) -> Result<Vec<(TokenSeq, f64)>> {
    fn walk<M: LanguageModel + ?Sized>(
        model: &M,
        prompt: &[TokenId],
        filter: Option<&SamplingParams>,
        prefix: &mut Vec<TokenId>,
        logp: f64,
        limit: usize,
        out: &mut Vec<(TokenSeq, f64)>,
    ) -> Result<()> {
        let step: Vec<f64> = match filter {
            None => model.next_token_logprobs(prompt, prefix)?,
            Some(p) => apply_sampling_filters(&model.next_token_logits(prompt, prefix)?, p)
                .probs()
                .iter()
                .map(|q| q.ln())
                .collect(),
        };
        let eos = model.vocab().eos_id();
        for (tok, &lp) in step.iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            prefix.push(tok as TokenId);
            if tok as TokenId == eos {
                if out.len() >= limit {
                    return Err(Error::StateSpaceTooLarge { limit });
                }
                out.push((TokenSeq(prefix.clone()), logp + lp));
            } else {
                walk(model, prompt, filter, prefix, logp + lp, limit, out)?;
            }
            prefix.pop();
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(model, prompt, filter, &mut Vec::new(), 0.0, limit, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Vocab {
        Vocab::with_eos(["a", "b"]).unwrap()
    }

    #[test]
    fn uniform_order_zero_logits_are_equal() {
        let m = TabularLM::uniform(abc(), 4).unwrap();
        let l = m.next_token_logits(&[], &[0]).unwrap();
        assert!(l.values().iter().all(|&v| v == l.values()[0]));
    }

    #[test]
    fn forced_eos_at_last_depth() {
        let m = TabularLM::uniform(abc(), 3).unwrap();
        let p = m.next_token_logprobs(&[], &[0, 1]).unwrap();
        assert_eq!(p[2], 0.0);
        assert_eq!(p[0], f64::NEG_INFINITY);
        assert!(m.next_token_logits(&[], &[0, 1, 0]).is_err());
    }

    #[test]
    fn missing_context_without_default() {
        let m = TabularLM::new(abc(), 1, 4).unwrap().with_row(&[0], vec![0.0, 0.0, 0.0]).unwrap();
        assert!(m.next_token_logits(&[], &[0]).is_ok());
        match m.next_token_logits(&[], &[1]) {
            Err(Error::MissingContext { context }) => assert_eq!(context, vec![1]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn context_spans_prompt_and_prefix() {
        let m = TabularLM::new(abc(), 2, 5)
            .unwrap()
            .with_default(vec![0.0, 0.0, 0.0])
            .unwrap()
            .with_row(&[1, 0], vec![5.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(m.next_token_logits(&[1], &[0]).unwrap().values()[0], 5.0);
        assert_eq!(m.next_token_logits(&[0], &[0]).unwrap().values()[0], 0.0);
    }

    #[test]
    fn row_softmax_matches_hand_fixture() {
        // row [ln 1, ln 2, ln 5] ⇒ probs [1/8, 2/8, 5/8]
        let m = TabularLM::new(abc(), 0, 5)
            .unwrap()
            .with_default(vec![0.0, 2f64.ln(), 5f64.ln()])
            .unwrap();
        let p = m.next_token_logits(&[], &[]).unwrap().softmax();
        for (got, want) in p.iter().zip([0.125, 0.25, 0.625]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn sequence_logprob_basic_cases() {
        let v = Vocab::with_eos(["a", "b"]).unwrap();
        let m = TabularLM::uniform(v, 5).unwrap();
        assert_eq!(sequence_logprob(&m, &[], &[]).unwrap(), 0.0);
        let lp = sequence_logprob(&m, &[], &[0, 1]).unwrap();
        assert!((lp - 2.0 * (1.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn enumeration_covers_all_sequences() {
        let m = TabularLM::uniform(abc(), 3).unwrap();
        let seqs = enumerate_responses(&m, &[], None, 100).unwrap();
        // 1 + 2 + 4 complete sequences
        assert_eq!(seqs.len(), 7);
        let mass: f64 = seqs.iter().map(|(_, lp)| lp.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-12);
        assert!(matches!(
            enumerate_responses(&m, &[], None, 5),
            Err(Error::StateSpaceTooLarge { limit: 5 })
        ));
    }

    #[test]
    fn fixture_round_trip() {
        let m = TabularLM::new(abc(), 1, 4)
            .unwrap()
            .with_default(vec![0.0, -0.25, f64::NEG_INFINITY])
            .unwrap()
            .with_row(&[], vec![0.1, 0.2, 0.3])
            .unwrap()
            .with_row(&[1], vec![1.0 / 3.0, -2.5, 0.0])
            .unwrap();
        let text = m.to_fixture();
        assert_eq!(TabularLM::parse(&text).unwrap(), m);
    }

    #[test]
    fn fixture_errors_carry_line_numbers() {
        let text = "vocab a b <eos>\neos <eos>\norder 1\nhorizon 3\nrow z | 0 0 0\n";
        match TabularLM::parse(text) {
            Err(Error::Fixture { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let text = "vocab a b <eos>\neos <eos>\norder 1\nhorizon 3\nrow a | 0 0\n";
        assert!(matches!(TabularLM::parse(text), Err(Error::Fixture { line: 5, .. })));
    }
}
