//! Edit-distance scoring, pooled per corpus and broken down per domain.
//!
//! WER is scored on the detokenized output joined with whitespace, one word
//! per token (a space symbol is written as `▁`), so its denominator is the
//! reference token count. The rate over the space-delimited words of the
//! plain text is kept beside it.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Manifest, Tokenizer};
use crate::decoding::TranscriptRecord;
use crate::error::{Error, Result};

/// Substitution, insertion and deletion counts against `reference` units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn rate(&self) -> f64 {
        if self.reference == 0 {
            0.0
        } else {
            self.errors() as f64 / self.reference as f64
        }
    }

    pub fn add(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference += other.reference;
    }
}

/// Minimal-cost alignment with unit costs. Among equal-cost alignments the
/// substitution-first backtrace is taken, so counts are deterministic.
pub fn edit_counts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = EditCounts {
        reference: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]) {
            if reference[i - 1] != hypothesis[j - 1] {
                c.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// `(wer, S, I, D)` over whitespace-separated words.
pub fn wer(reference: &str, hypothesis: &str) -> Result<(f64, usize, usize, usize)> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::invalid("reference has no words"));
    }
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let c = edit_counts(&r, &h);
    Ok((c.rate(), c.substitutions, c.insertions, c.deletions))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SetScore {
    pub utterances: usize,
    /// Whitespace-joined token strings.
    pub units: EditCounts,
    pub tokens: EditCounts,
    /// Space-delimited words of the plain detokenized text.
    pub words: EditCounts,
    pub wer: f64,
    pub ter: f64,
    pub space_delimited_wer: f64,
    /// Utterances whose decoder flagged no complete hypothesis.
    pub flagged: usize,
}

impl SetScore {
    fn add(&mut self, units: &EditCounts, tokens: &EditCounts, words: &EditCounts, flagged: bool) {
        self.utterances += 1;
        self.units.add(units);
        self.tokens.add(tokens);
        self.words.add(words);
        self.flagged += usize::from(flagged);
        self.wer = self.units.rate();
        self.ter = self.tokens.rate();
        self.space_delimited_wer = self.words.rate();
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: SetScore,
    pub domains: BTreeMap<String, SetScore>,
    /// Decoder-LM perplexity on the references, when a model was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    pub config_fingerprint: String,
}

/// `ids` as whitespace-joined words, one per token.
pub fn joined_tokens(tok: &Tokenizer, ids: &[u32]) -> String {
    ids.iter()
        .map(|&i| match tok.token_str(i) {
            s if s.trim().is_empty() => "\u{2581}",
            s => s,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Pool errors over the manifest: corpus WER is total errors over total
/// reference words, not a mean of per-utterance rates.
pub fn evaluate(
    transcripts: &[TranscriptRecord],
    manifest: &Manifest,
    tok: &Tokenizer,
    config_fingerprint: &str,
) -> Result<EvalReport> {
    let by_id: HashMap<&str, &TranscriptRecord> = transcripts.iter().map(|t| (t.id.as_str(), t)).collect();
    let missing: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| !by_id.contains_key(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let mut report = EvalReport {
        config_fingerprint: config_fingerprint.to_string(),
        ..EvalReport::default()
    };
    for rec in &manifest.records {
        let hyp = by_id[rec.id.as_str()];
        let ref_text = tok.decode(&rec.tokens);
        let r_words: Vec<&str> = ref_text.split_whitespace().collect();
        let hyp_text = tok.decode(&hyp.tokens);
        let h_words: Vec<&str> = hyp_text.split_whitespace().collect();
        let words = edit_counts(&r_words, &h_words);
        let (r_joined, h_joined) = (joined_tokens(tok, &rec.tokens), joined_tokens(tok, &hyp.tokens));
        let r_units: Vec<&str> = r_joined.split_whitespace().collect();
        let h_units: Vec<&str> = h_joined.split_whitespace().collect();
        let units = edit_counts(&r_units, &h_units);
        let tokens = edit_counts(&rec.tokens, &hyp.tokens);
        report.overall.add(&units, &tokens, &words, hyp.flagged);
        report
            .domains
            .entry(rec.domain.clone())
            .or_default()
            .add(&units, &tokens, &words, hyp.flagged);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(wer("a b c", "a b c").unwrap(), (0.0, 0, 0, 0));
        let (w, s, i, d) = wer("a b c", "a x c").unwrap();
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!((s, i, d), (1, 0, 0));
        assert_eq!(wer("a b", "").unwrap(), (1.0, 0, 0, 2));
        assert!(wer("", "a").is_err());
        let (w, _, i, _) = wer("a", "a b c").unwrap();
        assert_eq!((w, i), (2.0, 2));
    }

    #[test]
    fn counts_match_distance() {
        let c = edit_counts(&[1, 2, 3, 4], &[2, 3, 5, 4, 6]);
        assert_eq!(c.errors(), 3);
    }

    fn record(id: &str, tokens: Vec<u32>) -> crate::corpus::ManifestRecord {
        crate::corpus::ManifestRecord {
            id: id.into(),
            path: None,
            tokens,
            domain: "d".into(),
            frames: None,
            spans: None,
        }
    }

    fn hyp(id: &str, tokens: Vec<u32>) -> TranscriptRecord {
        TranscriptRecord {
            id: id.into(),
            domain: "d".into(),
            tokens,
            text: String::new(),
            score: 0.0,
            attention: 0.0,
            ctc: 0.0,
            lm_target: 0.0,
            lm_source: 0.0,
            flagged: false,
            error: None,
        }
    }

    #[test]
    fn pooled_over_tokens_not_averaged() {
        // symbols: " " = 0, a = 1, b = 2
        let tok = Tokenizer::build(&["ab "]).unwrap();
        let (sp, a, b) = (tok.encode(" ")[0], tok.encode("a")[0], tok.encode("b")[0]);
        let m = Manifest::new(vec![record("u1", vec![a]), record("u2", vec![a, sp, b, b])], ".");
        // u1: one substitution over 1 unit; u2: one deletion over 4 units
        let t = vec![hyp("u1", vec![b]), hyp("u2", vec![a, b, b])];
        let r = evaluate(&t, &m, &tok, "fp").unwrap();
        assert_eq!(r.overall.units.errors(), 2);
        assert_eq!(r.overall.units.reference, 5);
        assert!((r.overall.wer - 0.4).abs() < 1e-12);
        assert!((r.overall.ter - 0.4).abs() < 1e-12);
        // the mean of per-utterance rates would be (1 + 0.25) / 2
        // space-delimited: "a" vs "b", "a bb" vs "abb"
        assert_eq!(r.overall.words.reference, 3);
        assert_eq!(r.overall.words.errors(), 3);
        assert_eq!(r.domains["d"], r.overall);
        assert_eq!(r.config_fingerprint, "fp");
        assert_eq!(joined_tokens(&tok, &[a, sp, b]), "a \u{2581} b");
    }

    #[test]
    fn missing_ids_are_listed() {
        let tok = Tokenizer::build(&["ab"]).unwrap();
        let m = Manifest::new(vec![record("u1", vec![0]), record("u2", vec![1])], ".");
        match evaluate(&[hyp("u1", vec![0])], &m, &tok, "") {
            Err(Error::MissingIds(ids)) => assert_eq!(ids, vec!["u2".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
