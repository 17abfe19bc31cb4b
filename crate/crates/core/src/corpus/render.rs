use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::util::{derive_seed, rng_for, write_atomic};

/// A `frames × dim` block of acoustic features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub domain: String,
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, domain: impl Into<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "feature buffer of {} values is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            domain: domain.into(),
            frames: data.len() / dim,
            dim,
            data,
        })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Renderer settings: every token becomes a run of noisy copies of its prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSpec {
    pub feature_dim: usize,
    /// Inclusive `[min, max]` frames per token.
    pub frames_per_token: [usize; 2],
    pub prototype_seed: u64,
    pub noise_std: f64,
    /// When positive, symbols `2k` and `2k+1` share a base prototype and differ
    /// only by an offset of this scale, which makes them acoustically confusable.
    pub pair_spread: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            frames_per_token: [6, 10],
            prototype_seed: 17,
            noise_std: 1.0,
            pair_spread: 0.0,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.frames_per_token;
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        if lo == 0 || lo > hi {
            return Err(Error::invalid(format!("bad frames_per_token range [{lo}, {hi}]")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be a nonnegative number"));
        }
        if !(self.pair_spread >= 0.0 && self.pair_spread.is_finite()) {
            return Err(Error::invalid("pair_spread must be a nonnegative number"));
        }
        Ok(())
    }

    fn gaussian_vector(&self, stream: u64) -> Vec<f32> {
        let mut rng = rng_for(self.prototype_seed, &[stream]);
        (0..self.feature_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|x: f64| x as f32)
            .collect()
    }

    /// The noiseless feature vector for a token.
    pub fn prototype(&self, token: u32) -> Vec<f32> {
        if self.pair_spread > 0.0 {
            let base = self.gaussian_vector(0x100 + u64::from(token / 2));
            let offset = self.gaussian_vector(0x10_000 + u64::from(token));
            // offset has expected norm sqrt(dim); scale it to pair_spread
            let scale = (self.pair_spread / (self.feature_dim as f64).sqrt()) as f32;
            base.iter().zip(&offset).map(|(b, o)| b + scale * o).collect()
        } else {
            self.gaussian_vector(0x100 + u64::from(token))
        }
    }
}

/// Render tokens into features and the gold frame span of each token.
pub fn render_features(
    tokens: &[u32],
    spec: &RenderSpec,
    seed: u64,
) -> Result<(Vec<f32>, Vec<(usize, usize)>)> {
    spec.validate()?;
    if tokens.is_empty() {
        return Err(Error::invalid("cannot render an empty token sequence"));
    }
    let mut rng = rng_for(seed, &[0xFE]);
    let [lo, hi] = spec.frames_per_token;
    let mut data = Vec::new();
    let mut spans = Vec::with_capacity(tokens.len());
    let mut t = 0;
    for &tok in tokens {
        let proto = spec.prototype(tok);
        let dur = rng.gen_range(lo..=hi);
        for _ in 0..dur {
            for &p in &proto {
                let noise = if spec.noise_std > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (spec.noise_std * z) as f32
                } else {
                    0.0
                };
                data.push(p + noise);
            }
        }
        spans.push((t, t + dur));
        t += dur;
    }
    Ok((data, spans))
}

/// Seed for one utterance, derived from the dataset seed and its position.
pub fn utterance_seed(dataset_seed: u64, domain_hash: u64, split: u64, index: u64) -> u64 {
    derive_seed(dataset_seed, &[domain_hash, split, index])
}

const FEATURE_MAGIC: &[u8; 4] = b"HFEA";

/// Feature file: `HFEA`, `u32` frames, `u32` dim (little-endian), then f32 LE row-major.
pub fn write_features(path: &Path, feats: &FeatureSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * feats.data.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(feats.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.dim as u32).to_le_bytes());
    for v in &feats.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn read_features(path: &Path, id: &str, domain: &str) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path).at(path)?;
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "missing feature header"));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != frames * dim * 4 || dim == 0 {
        return Err(Error::format(
            path,
            format!("header says {frames}x{dim} but body has {} bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureSequence::new(id, domain, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_frames_equal_prototypes() {
        let spec = RenderSpec {
            frames_per_token: [2, 2],
            noise_std: 0.0,
            ..RenderSpec::default()
        };
        let (data, spans) = render_features(&[0, 1], &spec, 3).unwrap();
        let f = spec.feature_dim;
        assert_eq!(data.len(), 4 * f);
        assert_eq!(spans, vec![(0, 2), (2, 4)]);
        let a = spec.prototype(0);
        assert_eq!(&data[..f], &a[..]);
        assert_eq!(&data[f..2 * f], &a[..]);
        assert_eq!(&data[2 * f..3 * f], &spec.prototype(1)[..]);
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = RenderSpec::default();
        let a = render_features(&[3, 1, 4, 1], &spec, 9).unwrap();
        let b = render_features(&[3, 1, 4, 1], &spec, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spans_partition_the_utterance() {
        let spec = RenderSpec::default();
        let (data, spans) = render_features(&[1, 2, 3, 4, 5], &spec, 1).unwrap();
        assert_eq!(spans[0].0, 0);
        for w in spans.windows(2) {
            assert_eq!(w[0].1, w[1].0);
            assert!(w[0].0 < w[0].1);
        }
        assert_eq!(spans.last().unwrap().1 * spec.feature_dim, data.len());
    }

    #[test]
    fn noise_magnitude_matches_monte_carlo() {
        let spec = RenderSpec {
            noise_std: 0.1,
            ..RenderSpec::default()
        };
        let tokens: Vec<u32> = (0..125).map(|i| i % 7).collect();
        let (data, spans) = render_features(&tokens, &spec, 4).unwrap();
        let f = spec.feature_dim;
        let mut total = 0.0;
        let mut n = 0;
        for (tok, (s, e)) in tokens.iter().zip(&spans) {
            let proto = spec.prototype(*tok);
            for t in *s..*e {
                let err: f64 = (0..f)
                    .map(|k| f64::from(data[t * f + k] - proto[k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                total += err;
                n += 1;
            }
        }
        assert!(n >= 1000);
        let mean = total / n as f64;
        let expected = 0.1 * (f as f64).sqrt();
        assert!((mean - expected).abs() < 0.2 * expected, "{mean} vs {expected}");
    }

    #[test]
    fn confusable_pairs_are_close() {
        let spec = RenderSpec {
            pair_spread: 0.5,
            ..RenderSpec::default()
        };
        let d = |a: u32, b: u32| -> f32 {
            spec.prototype(a)
                .iter()
                .zip(spec.prototype(b))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f32>()
                .sqrt()
        };
        assert!(d(4, 5) < 1.5);
        assert!(d(4, 6) > 2.0);
    }

    #[test]
    fn empty_tokens_rejected() {
        assert!(render_features(&[], &RenderSpec::default(), 0).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let feats = FeatureSequence::new("u1", "g", 3, vec![1.0, -2.5, 3.25, 0.0, 1e-7, 7.0]).unwrap();
        let path = dir.path().join("u1.feat");
        write_features(&path, &feats).unwrap();
        let back = read_features(&path, "u1", "g").unwrap();
        assert_eq!(back, feats);
        std::fs::write(&path, b"nope").unwrap();
        assert!(read_features(&path, "u1", "g").is_err());
    }
}
