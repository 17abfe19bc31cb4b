//! Feature encoder shared by the CTC head and the acoustic branch.
//!
//! Frames are stacked in groups of `subsampling_factor` and projected to the
//! model dimension, then run through pre-norm self-attention layers. No token
//! input exists on this path.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::nn::{
    dropout, layer_norm_specs, linear_specs, sinusoidal_positions, tensor_from_f64, FeedForward,
    LayerNorm, Linear, MultiHeadAttention, ParamSpec, ParamStore, Precision, NEG_MASK,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub feedforward_dim: usize,
    pub subsampling_factor: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            layers: 2,
            model_dim: 64,
            heads: 4,
            feedforward_dim: 256,
            subsampling_factor: 4,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.subsampling_factor == 0 || self.feature_dim == 0 {
            return Err(Error::Config("encoder subsampling_factor and feature_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("encoder dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn output_frames(&self, input_frames: usize) -> usize {
        input_frames.div_ceil(self.subsampling_factor)
    }
}

/// Encoder outputs for a batch, `B × T'max × D`, with per-utterance valid lengths.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    pub values: Tensor,
    pub lengths: Vec<usize>,
    pub ids: Vec<String>,
}

impl EncoderStates {
    pub fn max_frames(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    /// Additive key mask `B × 1 × 1 × T'max` hiding padded frames.
    pub fn key_mask(&self, precision: Precision) -> Result<Tensor> {
        padding_mask(&self.lengths, self.max_frames(), None, precision)
    }
}

/// Additive mask over key frames. `kept`, when given, further restricts each
/// utterance to the listed frames.
pub fn padding_mask(
    lengths: &[usize],
    max_frames: usize,
    kept: Option<&[Vec<usize>]>,
    precision: Precision,
) -> Result<Tensor> {
    let mut m = vec![NEG_MASK; lengths.len() * max_frames];
    for (b, &len) in lengths.iter().enumerate() {
        match kept {
            Some(k) => {
                for &t in &k[b] {
                    if t < len {
                        m[b * max_frames + t] = 0.0;
                    }
                }
            }
            None => m[b * max_frames..b * max_frames + len].iter_mut().for_each(|v| *v = 0.0),
        }
    }
    tensor_from_f64(m, &[lengths.len(), 1, 1, max_frames], precision)
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    input: Linear,
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
    precision: Precision,
}

pub(crate) fn attention_specs(specs: &mut Vec<ParamSpec>, name: &str, dim: usize) {
    for p in ["q", "k", "v", "o"] {
        linear_specs(specs, &format!("{name}.{p}"), dim, dim);
    }
}

pub(crate) fn feedforward_specs(specs: &mut Vec<ParamSpec>, name: &str, dim: usize, hidden: usize) {
    linear_specs(specs, &format!("{name}.up"), dim, hidden);
    linear_specs(specs, &format!("{name}.down"), hidden, dim);
}

impl Encoder {
    pub fn param_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let d = cfg.model_dim;
        linear_specs(&mut specs, "encoder.input", cfg.feature_dim * cfg.subsampling_factor, d);
        for i in 0..cfg.layers {
            let p = format!("encoder.layers.{i}");
            layer_norm_specs(&mut specs, &format!("{p}.ln_attn"), d);
            attention_specs(&mut specs, &format!("{p}.attn"), d);
            layer_norm_specs(&mut specs, &format!("{p}.ln_ff"), d);
            feedforward_specs(&mut specs, &format!("{p}.ff"), d, cfg.feedforward_dim);
        }
        layer_norm_specs(&mut specs, "encoder.ln_out", d);
        specs
    }

    pub fn load(cfg: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("encoder.layers.{i}");
                Ok(EncoderLayer {
                    ln_attn: LayerNorm::load(store, &format!("{p}.ln_attn"))?,
                    attn: MultiHeadAttention::load(store, &format!("{p}.attn"), cfg.heads)?,
                    ln_ff: LayerNorm::load(store, &format!("{p}.ln_ff"))?,
                    ff: FeedForward::load(store, &format!("{p}.ff"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            input: Linear::load(store, "encoder.input")?,
            layers,
            ln_out: LayerNorm::load(store, "encoder.ln_out")?,
            precision: store.precision(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Encode a batch. Dropout is active only when `train_rng` is given.
    pub fn encode(
        &self,
        feats: &[&FeatureSequence],
        mut train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderStates> {
        if feats.is_empty() {
            return Err(Error::invalid("empty encoder batch"));
        }
        let factor = self.cfg.subsampling_factor;
        let f = self.cfg.feature_dim;
        for x in feats {
            if x.dim != f {
                return Err(Error::invalid(format!(
                    "utterance {} has feature dim {}, encoder expects {f}",
                    x.id, x.dim
                )));
            }
            if x.frames < factor {
                return Err(Error::invalid(format!(
                    "utterance {} has {} frames, fewer than the subsampling factor {factor}",
                    x.id, x.frames
                )));
            }
            if x.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("utterance {} has non-finite features", x.id)));
            }
        }
        let lengths: Vec<usize> = feats.iter().map(|x| self.cfg.output_frames(x.frames)).collect();
        let t_out = *lengths.iter().max().unwrap();
        let b = feats.len();

        let mut buf = vec![0.0f64; b * t_out * factor * f];
        for (i, x) in feats.iter().enumerate() {
            let base = i * t_out * factor * f;
            for (j, v) in x.data.iter().enumerate() {
                buf[base + j] = f64::from(*v);
            }
        }
        let input = tensor_from_f64(buf, &[b, t_out, factor * f], self.precision)?;
        let pos = sinusoidal_positions(t_out, self.cfg.model_dim, self.precision)?;
        let mut x = self.input.forward(&input)?.broadcast_add(&pos)?;
        let mask = padding_mask(&lengths, t_out, None, self.precision)?;
        let p = self.cfg.dropout;

        for layer in &self.layers {
            let n = layer.ln_attn.forward(&x)?;
            let mut a = layer.attn.forward(&n, &n, Some(&mask))?.output;
            if let Some(rng) = train_rng.as_deref_mut() {
                a = dropout(&a, p, rng)?;
            }
            x = (x + a)?;
            let mut h = layer.ff.forward(&layer.ln_ff.forward(&x)?)?;
            if let Some(rng) = train_rng.as_deref_mut() {
                h = dropout(&h, p, rng)?;
            }
            x = (x + h)?;
        }
        Ok(EncoderStates {
            values: self.ln_out.forward(&x)?,
            lengths,
            ids: feats.iter().map(|x| x.id.clone()).collect(),
        })
    }
}
