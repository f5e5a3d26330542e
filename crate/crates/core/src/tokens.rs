//! Vocabularies, token sequences and the greedy longest-match tokenizer.

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// An ordered symbol table with a designated end-of-sequence entry.
///
/// The EOS symbol is only a display name: it never participates in encoding
/// and decodes to the empty string.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    symbols: Vec<String>,
    eos_id: TokenId,
    lookup: HashMap<String, TokenId>,
    max_symbol_len: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    symbols: Vec<String>,
    eos_id: TokenId,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;
    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::new(r.symbols, r.eos_id)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { symbols: v.symbols, eos_id: v.eos_id }
    }
}

impl Vocab {
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>, eos_id: TokenId) -> Result<Self> {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        if symbols.len() < 2 {
            return Err(Error::InvalidVocab("vocabulary needs at least two symbols".into()));
        }
        if eos_id as usize >= symbols.len() {
            return Err(Error::InvalidVocab(format!("eos_id {eos_id} out of range")));
        }
        let mut lookup = HashMap::with_capacity(symbols.len());
        let mut max_symbol_len = 0;
        for (id, sym) in symbols.iter().enumerate() {
            if id as TokenId == eos_id {
                continue;
            }
            if sym.is_empty() {
                return Err(Error::InvalidVocab(format!("symbol {id} is empty")));
            }
            if lookup.insert(sym.clone(), id as TokenId).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate symbol {sym:?}")));
            }
            max_symbol_len = max_symbol_len.max(sym.len());
        }
        if lookup.contains_key(&symbols[eos_id as usize]) {
            return Err(Error::InvalidVocab("EOS name collides with a symbol".into()));
        }
        Ok(Self { symbols, eos_id, lookup, max_symbol_len })
    }

    /// Builds a vocabulary from plain symbols, appending `<eos>` as the last entry.
    pub fn with_eos<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        let eos = symbols.len() as TokenId;
        symbols.push("<eos>".to_string());
        Self::new(symbols, eos)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    /// Looks up a symbol by name, including the EOS display name.
    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        if symbol == self.symbols[self.eos_id as usize] {
            return Some(self.eos_id);
        }
        self.lookup.get(symbol).copied()
    }

    /// Checks the [`TokenSeq`] invariants: ids in range, EOS only in last position.
    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= self.symbols.len() {
                return Err(Error::InvalidSequence(format!("token {id} at {pos} out of range")));
            }
            if id == self.eos_id && pos + 1 != ids.len() {
                return Err(Error::InvalidSequence(format!("EOS at position {pos} is not final")));
            }
        }
        Ok(())
    }

    /// Greedy longest-match segmentation.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::new();
        let mut offset = 0;
        while offset < text.len() {
            let rest = &text[offset..];
            let mut end = rest.len().min(self.max_symbol_len);
            let mut found = None;
            while end > 0 {
                if rest.is_char_boundary(end) {
                    if let Some(&id) = self.lookup.get(&rest[..end]) {
                        found = Some((id, end));
                        break;
                    }
                }
                end -= 1;
            }
            let Some((id, len)) = found else {
                return Err(Error::UntokenizableText { offset });
            };
            ids.push(id);
            offset += len;
        }
        Ok(TokenSeq(ids))
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != self.eos_id)
            .filter_map(|&id| self.symbols.get(id as usize))
            .map(String::as_str)
            .collect()
    }

    pub fn is_complete(&self, ids: &[TokenId]) -> bool {
        ids.last() == Some(&self.eos_id)
    }
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.eos_id == other.eos_id && self.symbols == other.symbols
    }
}

impl Eq for Vocab {}

impl fmt::Debug for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocab").field("symbols", &self.symbols).field("eos_id", &self.eos_id).finish()
    }
}

/// Token ids into some [`Vocab`]. Validity is checked against a vocabulary with [`Vocab::check`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn extend_from_slice(&mut self, ids: &[TokenId]) {
        self.0.extend_from_slice(ids);
    }

    pub fn concat(&self, other: &[TokenId]) -> TokenSeq {
        let mut v = Vec::with_capacity(self.0.len() + other.len());
        v.extend_from_slice(&self.0);
        v.extend_from_slice(other);
        TokenSeq(v)
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

impl From<&[TokenId]> for TokenSeq {
    fn from(v: &[TokenId]) -> Self {
        Self(v.to_vec())
    }
}

impl FromIterator<TokenId> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_table_lookup() {
        let v = Vocab::with_eos(["a", "b"]).unwrap();
        assert_eq!(v.encode("ab").unwrap().0, vec![0, 1]);
    }

    #[test]
    fn encode_prefers_longest_match() {
        let v = Vocab::with_eos(["a", "ab"]).unwrap();
        assert_eq!(v.encode("ab").unwrap().0, vec![1]);
        assert_eq!(v.encode("aab").unwrap().0, vec![0, 1]);
    }

    #[test]
    fn untokenizable_reports_offset() {
        let v = Vocab::with_eos(["a", "b"]).unwrap();
        match v.encode("abxa") {
            Err(Error::UntokenizableText { offset }) => assert_eq!(offset, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decode_drops_eos() {
        let v = Vocab::with_eos(["a", "b"]).unwrap();
        assert_eq!(v.decode(&[0, 1, 2]), "ab");
        assert_eq!(v.decode(&[]), "");
    }

    #[test]
    fn rejects_bad_vocabs() {
        assert!(Vocab::new(["a"], 0).is_err());
        assert!(Vocab::new(["a", "a", "<eos>"], 2).is_err());
        assert!(Vocab::new(["a", "", "<eos>"], 2).is_err());
        assert!(Vocab::new(["a", "b"], 5).is_err());
        // EOS may be the empty string
        assert!(Vocab::new(["a", ""], 1).is_ok());
    }

    #[test]
    fn check_enforces_eos_position() {
        let v = Vocab::with_eos(["a", "b"]).unwrap();
        assert!(v.check(&[0, 1, 2]).is_ok());
        assert!(v.check(&[0, 2, 1]).is_err());
        assert!(v.check(&[3]).is_err());
    }

    #[test]
    fn serde_round_trip_rebuilds_lookup() {
        let v = Vocab::with_eos(["a", "bc"]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.encode("bca").unwrap().0, vec![1, 0]);
    }

    proptest! {
        #[test]
        fn round_trip_symbol_concatenations(picks in proptest::collection::vec(0usize..4, 0..20)) {
            let v = Vocab::with_eos(["a", "ab", "b", "ba"]).unwrap();
            let text: String = picks.iter().map(|&i| v.symbols()[i].as_str()).collect();
            let ids = v.encode(&text).unwrap();
            prop_assert_eq!(v.decode(&ids), text);
        }
    }
}
