use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::util::write_atomic;

/// Character-level tokenizer.
///
/// Id layout, with `n` text symbols:
///
/// | ids        | meaning                                   |
/// |------------|-------------------------------------------|
/// | `0..n`     | text symbols, sorted                      |
/// | `n`        | end of sentence (also an output class)    |
/// | `n + 1`    | CTC blank, reserved, never in text        |
/// | `n + 2`    | start of sentence (decoder input only)    |
/// | `n + 3`    | unknown symbol                            |
///
/// The label inventory predicted by the decoder is `0..=n` (text plus eos),
/// and the CTC head scores those plus blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TokenizerFile", into = "TokenizerFile")]
pub struct Tokenizer {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    symbols: Vec<String>,
}

impl TryFrom<TokenizerFile> for Tokenizer {
    type Error = Error;
    fn try_from(f: TokenizerFile) -> Result<Self> {
        Tokenizer::from_symbols(f.symbols)
    }
}

impl From<Tokenizer> for TokenizerFile {
    fn from(t: Tokenizer) -> Self {
        TokenizerFile { symbols: t.symbols }
    }
}

impl Tokenizer {
    /// Collect every character of the corpus into a sorted symbol inventory.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot build a tokenizer from an empty corpus"));
        }
        let symbols: BTreeSet<String> = corpus
            .iter()
            .flat_map(|line| line.as_ref().chars())
            .map(String::from)
            .collect();
        if symbols.is_empty() {
            return Err(Error::invalid("corpus contains no symbols"));
        }
        Self::from_symbols(symbols.into_iter().collect())
    }

    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.chars().count() != 1 {
                return Err(Error::invalid(format!("symbol {s:?} is not a single character")));
            }
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn num_text(&self) -> usize {
        self.symbols.len()
    }

    pub fn eos(&self) -> u32 {
        self.symbols.len() as u32
    }

    pub fn blank(&self) -> u32 {
        self.symbols.len() as u32 + 1
    }

    pub fn sos(&self) -> u32 {
        self.symbols.len() as u32 + 2
    }

    pub fn unk(&self) -> u32 {
        self.symbols.len() as u32 + 3
    }

    /// All ids, including the reserved blank.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + 4
    }

    /// Size of the decoder output distribution (text symbols plus eos).
    pub fn num_output_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Size of the CTC output distribution (output classes plus blank).
    pub fn num_ctc_classes(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn is_text(&self, id: u32) -> bool {
        (id as usize) < self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut buf = [0u8; 4];
        text.chars()
            .map(|c| {
                let s: &str = c.encode_utf8(&mut buf);
                self.index.get(s).copied().unwrap_or(self.unk())
            })
            .collect()
    }

    /// Render ids as text; sos/eos/blank are dropped, unk renders as U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_text(id) {
                out.push_str(&self.symbols[id as usize]);
            } else if id == self.unk() {
                out.push('\u{FFFD}');
            }
        }
        out
    }

    pub fn token_str(&self, id: u32) -> &str {
        match id {
            i if self.is_text(i) => &self.symbols[i as usize],
            i if i == self.eos() => "<eos>",
            i if i == self.blank() => "<blank>",
            i if i == self.sos() => "<sos>",
            _ => "<unk>",
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_symbol_corpus() {
        let tok = Tokenizer::build(&["ab", "ba"]).unwrap();
        assert_eq!(tok.num_text(), 2);
        assert_eq!(tok.vocab_size(), 6);
        let ids = tok.encode("ab");
        assert_eq!(ids, vec![0, 1]);
        assert_eq!(tok.decode(&ids), "ab");
    }

    #[test]
    fn unknown_symbol_maps_to_unk() {
        let tok = Tokenizer::build(&["ab"]).unwrap();
        assert_eq!(tok.encode("c"), vec![tok.unk()]);
    }

    #[test]
    fn specials_are_distinct_and_outside_text() {
        let tok = Tokenizer::build(&["xyz"]).unwrap();
        let specials = [tok.sos(), tok.eos(), tok.unk(), tok.blank()];
        for (i, a) in specials.iter().enumerate() {
            assert!(!tok.is_text(*a));
            for b in &specials[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert!(specials.iter().all(|&s| (s as usize) < tok.vocab_size()));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(Tokenizer::build(&empty).is_err());
    }

    #[test]
    fn json_round_trip() {
        let tok = Tokenizer::build(&["hello world"]).unwrap();
        let s = serde_json::to_string(&tok).unwrap();
        let back: Tokenizer = serde_json::from_str(&s).unwrap();
        assert_eq!(tok, back);
    }

    proptest::proptest! {
        #[test]
        fn encode_decode_round_trips(ids in proptest::collection::vec(0u32..5, 0..40)) {
            let tok = Tokenizer::build(&["abcde"]).unwrap();
            proptest::prop_assert_eq!(tok.encode(&tok.decode(&ids)), ids);
        }
    }
}
