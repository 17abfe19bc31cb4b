//! Token n-gram LM with interpolated absolute discounting.
//!
//! For a history `h` seen in training, with `c(h, w)` the continuation counts,
//! `c(h)` their sum and `N(h)` the number of distinct continuations,
//!
//! ```text
//! p(w | h) = max(c(h, w) - D, 0) / c(h) + D * N(h) / c(h) * p(w | h')
//! ```
//!
//! where `h'` drops the oldest token. Unseen histories back off with weight
//! one, and the recursion bottoms out in the uniform distribution. Every
//! conditional is normalized by construction.
//!
//! The text format stores, per seen history, the backoff weight `D N(h)/c(h)`
//! and the interpolated log probability of each seen continuation:
//!
//! ```text
//! #haed-ngram v1
//! order 3
//! classes 31
//! sos 32
//! discount 0.1
//! \context
//! backoff -2.0794415416798357
//! 0 -1.2
//! ...
//! \context 32 5
//! ...
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::lm_decoder::LanguageModel;
use crate::util::write_atomic;

pub const DEFAULT_DISCOUNT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
struct ContextEntry {
    /// Natural log of the backoff weight.
    log_backoff: f64,
    /// Interpolated log probability of each seen continuation.
    log_probs: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramLm {
    order: usize,
    /// Predicted classes `0..classes` (text symbols and eos).
    classes: usize,
    /// History padding symbol.
    sos: u32,
    discount: f64,
    contexts: BTreeMap<Vec<u32>, ContextEntry>,
}

impl NGramLm {
    /// Train on token sequences; each sentence is padded with `order - 1`
    /// sos symbols and terminated by `eos` (which must be `classes - 1`).
    pub fn train(texts: &[Vec<u32>], order: usize, classes: usize, eos: u32, sos: u32, discount: f64) -> Result<Self> {
        if order < 1 {
            return Err(Error::invalid("n-gram order must be >= 1"));
        }
        if texts.is_empty() {
            return Err(Error::invalid("n-gram training text is empty"));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid("discount must lie in (0, 1)"));
        }
        if eos as usize >= classes {
            return Err(Error::invalid("eos must be a predicted class"));
        }
        // counts[h][w] for every history length 0..order
        let mut counts: BTreeMap<Vec<u32>, BTreeMap<u32, u64>> = BTreeMap::new();
        for t in texts {
            let mut seq: Vec<u32> = vec![sos; order - 1];
            for &w in t {
                if w as usize >= classes || w == eos {
                    return Err(Error::invalid(format!("token {w} is not a text symbol")));
                }
                seq.push(w);
            }
            seq.push(eos);
            for i in order - 1..seq.len() {
                for k in 0..order {
                    let h = seq[i - k..i].to_vec();
                    *counts.entry(h).or_default().entry(seq[i]).or_default() += 1;
                }
            }
        }
        let mut lm = Self {
            order,
            classes,
            sos,
            discount,
            contexts: BTreeMap::new(),
        };
        // shorter histories first, so lower-order lookups are ready
        let mut histories: Vec<&Vec<u32>> = counts.keys().collect();
        histories.sort_by_key(|h| (h.len(), (*h).clone()));
        for h in histories {
            let row = &counts[h];
            let total: u64 = row.values().sum();
            let total = total as f64;
            let gamma = discount * row.len() as f64 / total;
            let mut log_probs = BTreeMap::new();
            for (&w, &c) in row {
                let lower = lm.prob_with_history(&h[h.len().min(1)..], w);
                let p = (c as f64 - discount).max(0.0) / total + gamma * lower;
                log_probs.insert(w, p.ln());
            }
            lm.contexts.insert(
                h.clone(),
                ContextEntry {
                    log_backoff: gamma.ln(),
                    log_probs,
                },
            );
        }
        Ok(lm)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Histories seen in training.
    pub fn histories(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.contexts.keys()
    }

    fn prob_with_history(&self, h: &[u32], w: u32) -> f64 {
        self.log_prob_with_history(h, w).exp()
    }

    fn log_prob_with_history(&self, h: &[u32], w: u32) -> f64 {
        match self.contexts.get(h) {
            Some(entry) => match entry.log_probs.get(&w) {
                Some(&lp) => lp,
                None => entry.log_backoff + self.lower(h, w),
            },
            None => self.lower(h, w),
        }
    }

    fn lower(&self, h: &[u32], w: u32) -> f64 {
        if h.is_empty() {
            -(self.classes as f64).ln()
        } else {
            self.log_prob_with_history(&h[1..], w)
        }
    }

    /// The last `order - 1` tokens of `sos^(order-1) + prefix`.
    pub fn history(&self, prefix: &[u32]) -> Vec<u32> {
        let n = self.order - 1;
        let mut h: Vec<u32> = vec![self.sos; n.saturating_sub(prefix.len())];
        h.extend_from_slice(&prefix[prefix.len().saturating_sub(n)..]);
        h
    }

    /// `ln p(w | prefix)`.
    pub fn log_prob(&self, prefix: &[u32], w: u32) -> f64 {
        self.log_prob_with_history(&self.history(prefix), w)
    }

    /// Log probabilities of every class after the given history.
    pub fn row_for_history(&self, h: &[u32]) -> Vec<f64> {
        (0..self.classes as u32).map(|w| self.log_prob_with_history(h, w)).collect()
    }

    pub fn row(&self, prefix: &[u32]) -> Vec<f64> {
        self.row_for_history(&self.history(prefix))
    }

    /// Sum of `-ln p` over each sentence plus its eos.
    pub fn nll(&self, tokens: &[u32], eos: u32) -> f64 {
        let mut total = 0.0;
        for u in 0..=tokens.len() {
            let w = if u < tokens.len() { tokens[u] } else { eos };
            total -= self.log_prob(&tokens[..u], w);
        }
        total
    }

    pub fn perplexity(&self, texts: &[Vec<u32>], eos: u32) -> Result<f64> {
        if texts.is_empty() {
            return Err(Error::invalid("perplexity needs a nonempty corpus"));
        }
        let nll: f64 = texts.iter().map(|t| self.nll(t, eos)).sum();
        let n: usize = texts.iter().map(|t| t.len() + 1).sum();
        Ok((nll / n as f64).exp())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "#haed-ngram v1").unwrap();
        writeln!(s, "order {}", self.order).unwrap();
        writeln!(s, "classes {}", self.classes).unwrap();
        writeln!(s, "sos {}", self.sos).unwrap();
        writeln!(s, "discount {}", self.discount).unwrap();
        let mut keys: Vec<&Vec<u32>> = self.contexts.keys().collect();
        keys.sort_by_key(|h| (h.len(), (*h).clone()));
        for h in keys {
            let e = &self.contexts[h];
            let ids: Vec<String> = h.iter().map(u32::to_string).collect();
            if ids.is_empty() {
                writeln!(s, "\\context").unwrap();
            } else {
                writeln!(s, "\\context {}", ids.join(" ")).unwrap();
            }
            writeln!(s, "backoff {}", e.log_backoff).unwrap();
            for (w, lp) in &e.log_probs {
                writeln!(s, "{w} {lp}").unwrap();
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|msg| Error::format(path, msg))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .map(|(_, l)| l.to_string())
                .ok_or_else(|| format!("missing {what}"))
        };
        if next("header")? != "#haed-ngram v1" {
            return Err("not an n-gram file".into());
        }
        fn field<T: std::str::FromStr>(line: &str, key: &str) -> std::result::Result<T, String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format!("expected `{key} <value>`, got `{line}`"))
        }
        let order: usize = field(&next("order")?, "order")?;
        let classes: usize = field(&next("classes")?, "classes")?;
        let sos: u32 = field(&next("sos")?, "sos")?;
        let discount: f64 = field(&next("discount")?, "discount")?;
        if order < 1 {
            return Err("order must be >= 1".into());
        }
        let mut contexts = BTreeMap::new();
        let mut current: Option<(Vec<u32>, ContextEntry)> = None;
        for (no, line) in lines {
            let bad = |m: &str| format!("line {}: {m}", no + 1);
            if let Some(rest) = line.strip_prefix("\\context") {
                if let Some((h, e)) = current.take() {
                    contexts.insert(h, e);
                }
                let h = rest
                    .split_whitespace()
                    .map(|t| t.parse::<u32>().map_err(|_| bad("bad history id")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if h.len() >= order {
                    return Err(bad("history longer than order - 1"));
                }
                current = Some((
                    h,
                    ContextEntry {
                        log_backoff: f64::NAN,
                        log_probs: BTreeMap::new(),
                    },
                ));
            } else if let Some(v) = line.strip_prefix("backoff ") {
                let (_, e) = current.as_mut().ok_or_else(|| bad("backoff outside a context"))?;
                e.log_backoff = v.parse().map_err(|_| bad("bad backoff"))?;
            } else if !line.trim().is_empty() {
                let (_, e) = current.as_mut().ok_or_else(|| bad("entry outside a context"))?;
                let mut it = line.split_whitespace();
                let w: u32 = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad token id"))?;
                let lp: f64 = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad log prob"))?;
                if w as usize >= classes {
                    return Err(bad("token id outside the classes"));
                }
                e.log_probs.insert(w, lp);
            }
        }
        if let Some((h, e)) = current.take() {
            contexts.insert(h, e);
        }
        if contexts.values().any(|e| e.log_backoff.is_nan()) {
            return Err("context without a backoff line".into());
        }
        Ok(Self {
            order,
            classes,
            sos,
            discount,
            contexts,
        })
    }
}

impl LanguageModel for NGramLm {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.row(p)).collect())
    }
}
