use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{rng_for, str_hash};

/// A text domain: a first-order Markov chain over text symbol ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub transition_table: Vec<Vec<f64>>,
    pub initial_distribution: Vec<f64>,
    pub mean_utterance_length: usize,
}

/// Knobs for generating a random sparse domain chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainShape {
    /// Number of favoured successors per symbol.
    pub successors: usize,
    /// Total probability mass spread uniformly over all symbols in each row.
    pub floor: f64,
}

impl Default for ChainShape {
    fn default() -> Self {
        Self {
            successors: 3,
            floor: 0.05,
        }
    }
}

fn sparse_row(rng: &mut impl Rng, n: usize, shape: ChainShape) -> Vec<f64> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let k = shape.successors.clamp(1, n);
    let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut row = vec![shape.floor / n as f64; n];
    for (id, w) in ids[..k].iter().zip(&weights) {
        row[*id] += (1.0 - shape.floor) * w / total;
    }
    row
}

impl DomainSpec {
    /// Deterministic random chain from a name and seed.
    pub fn generate(
        name: &str,
        num_symbols: usize,
        shape: ChainShape,
        mean_utterance_length: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_symbols == 0 {
            return Err(Error::invalid("domain needs at least one symbol"));
        }
        if !(0.0..=1.0).contains(&shape.floor) {
            return Err(Error::invalid("chain floor must lie in [0, 1]"));
        }
        let mut rng = rng_for(seed, &[str_hash(name), 0xD0]);
        let transition_table = (0..num_symbols)
            .map(|_| sparse_row(&mut rng, num_symbols, shape))
            .collect();
        let initial_distribution = sparse_row(
            &mut rng,
            num_symbols,
            ChainShape {
                successors: shape.successors * 2,
                ..shape
            },
        );
        let spec = Self {
            name: name.to_string(),
            transition_table,
            initial_distribution,
            mean_utterance_length,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `other`'s name and length with rows `(1 - w) * self + w * other`.
    pub fn mix(&self, other: &DomainSpec, w: f64) -> DomainSpec {
        let blend = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect() };
        DomainSpec {
            name: other.name.clone(),
            transition_table: self
                .transition_table
                .iter()
                .zip(&other.transition_table)
                .map(|(a, b)| blend(a, b))
                .collect(),
            initial_distribution: blend(&self.initial_distribution, &other.initial_distribution),
            mean_utterance_length: other.mean_utterance_length,
        }
    }

    pub fn num_symbols(&self) -> usize {
        self.initial_distribution.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.initial_distribution.len();
        if n == 0 {
            return Err(Error::invalid(format!("domain {} has no symbols", self.name)));
        }
        if self.mean_utterance_length == 0 {
            return Err(Error::invalid("mean utterance length must be positive"));
        }
        check_stochastic(&self.initial_distribution, n, "initial distribution")?;
        if self.transition_table.len() != n {
            return Err(Error::invalid(format!(
                "transition table has {} rows, expected {n}",
                self.transition_table.len()
            )));
        }
        for (i, row) in self.transition_table.iter().enumerate() {
            check_stochastic(row, n, &format!("transition row {i}"))?;
        }
        Ok(())
    }

    /// Longest utterance the sampler will produce.
    pub fn max_utterance_length(&self) -> usize {
        2 * self.mean_utterance_length
    }
}

fn check_stochastic(row: &[f64], n: usize, what: &str) -> Result<()> {
    if row.len() != n {
        return Err(Error::invalid(format!("{what} has length {}, expected {n}", row.len())));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

fn draw(rng: &mut impl Rng, probs: &[f64]) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    // rounding slack lands on the last positive entry
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0) as u32
}

/// Sample `n` token sequences from the domain chain.
///
/// Lengths are `1 + Geometric(1/mean)`, capped at twice the mean.
pub fn sample_text(spec: &DomainSpec, n: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let mut rng = rng_for(seed, &[str_hash(&spec.name), 0x5A]);
    let geom = Geometric::new(1.0 / spec.mean_utterance_length as f64)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let cap = spec.max_utterance_length();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = (1 + geom.sample(&mut rng) as usize).min(cap);
        let mut seq = Vec::with_capacity(len);
        let mut cur = draw(&mut rng, &spec.initial_distribution);
        seq.push(cur);
        while seq.len() < len {
            cur = draw(&mut rng, &spec.transition_table[cur as usize]);
            seq.push(cur);
        }
        out.push(seq);
    }
    Ok(out)
}

/// Empirical bigram joint distribution (flattened `n × n`) over a set of sequences.
pub fn bigram_distribution(seqs: &[Vec<u32>], n: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n * n];
    let mut total = 0.0;
    for s in seqs {
        for w in s.windows(2) {
            counts[w[0] as usize * n + w[1] as usize] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
