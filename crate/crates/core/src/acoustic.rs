//! The decoder's acoustic half. Each step's query is an encoder state taken at
//! the emission frame of the previous label; the layers only cross-attend into
//! the encoder output, so no token embedding or step-to-step path exists.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{attention_specs, feedforward_specs, padding_mask, EncoderStates};
use crate::error::{Error, Result};
use crate::nn::{
    dropout, layer_norm_specs, linear_specs, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    ParamSpec, ParamStore, Precision,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcousticConfig {
    pub layers: usize,
    pub heads: usize,
    pub feedforward_dim: usize,
    pub dropout: f64,
    /// Frame whose state serves as the query for the first step (after sos).
    pub sos_frame: usize,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            feedforward_dim: 256,
            dropout: 0.1,
            sos_frame: 0,
        }
    }
}

impl AcousticConfig {
    pub fn validate(&self, model_dim: usize) -> Result<()> {
        if self.heads == 0 || model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "acoustic heads {} must divide model_dim {model_dim}",
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("acoustic dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Query frame per decoder step: the sos frame, then each label's emission frame.
pub fn query_frames(alignment: &[usize], sos_frame: usize) -> Vec<usize> {
    std::iter::once(sos_frame).chain(alignment.iter().copied()).collect()
}

/// Gather `B × Lmax × D` queries, `L_b = U_b + 1`. Padded steps reuse the sos frame.
pub fn gather_queries(h: &EncoderStates, alignments: &[Vec<usize>], sos_frame: usize) -> Result<Tensor> {
    if alignments.len() != h.lengths.len() {
        return Err(Error::invalid("one alignment per utterance is required"));
    }
    let (b, t_max, d) = h.values.dims3()?;
    let steps = alignments.iter().map(|a| a.len() + 1).max().unwrap_or(1);
    let mut index = Vec::with_capacity(b * steps);
    for (i, (a, &len)) in alignments.iter().zip(&h.lengths).enumerate() {
        let mut frames = query_frames(a, sos_frame);
        frames.resize(steps, sos_frame);
        for t in frames {
            if t >= len {
                return Err(Error::invalid(format!(
                    "query frame {t} outside the {len} encoder frames of utterance {i}"
                )));
            }
            index.push((i * t_max + t) as u32);
        }
    }
    let index = Tensor::from_vec(index, b * steps, h.values.device())?;
    Ok(h.values
        .reshape((b * t_max, d))?
        .index_select(&index, 0)?
        .reshape((b, steps, d))?)
}

/// Acoustic scores `f(x, t)` per step, `B × L × V`, plus per-layer attention weights.
#[derive(Debug, Clone)]
pub struct AcousticScores {
    pub scores: Tensor,
    /// One `B × H × L × T'` tensor per layer.
    pub weights: Vec<Tensor>,
    /// First layer's attention context before the output projection.
    pub first_context: Tensor,
}

#[derive(Debug, Clone)]
struct CrossLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct AcousticBranch {
    cfg: AcousticConfig,
    layers: Vec<CrossLayer>,
    ln_out: LayerNorm,
    head: Linear,
    precision: Precision,
}

impl AcousticBranch {
    pub fn param_specs(cfg: &AcousticConfig, model_dim: usize, output_classes: usize) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for i in 0..cfg.layers {
            let p = format!("acoustic.layers.{i}");
            layer_norm_specs(&mut specs, &format!("{p}.ln_attn"), model_dim);
            attention_specs(&mut specs, &format!("{p}.attn"), model_dim);
            layer_norm_specs(&mut specs, &format!("{p}.ln_ff"), model_dim);
            feedforward_specs(&mut specs, &format!("{p}.ff"), model_dim, cfg.feedforward_dim);
        }
        layer_norm_specs(&mut specs, "acoustic.ln_out", model_dim);
        linear_specs(&mut specs, "acoustic.head", model_dim, output_classes);
        specs
    }

    pub fn load(cfg: &AcousticConfig, store: &ParamStore) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("acoustic.layers.{i}");
                Ok(CrossLayer {
                    ln_attn: LayerNorm::load(store, &format!("{p}.ln_attn"))?,
                    attn: MultiHeadAttention::load(store, &format!("{p}.attn"), cfg.heads)?,
                    ln_ff: LayerNorm::load(store, &format!("{p}.ln_ff"))?,
                    ff: FeedForward::load(store, &format!("{p}.ff"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            ln_out: LayerNorm::load(store, "acoustic.ln_out")?,
            head: Linear::load(store, "acoustic.head")?,
            precision: store.precision(),
        })
    }

    pub fn config(&self) -> &AcousticConfig {
        &self.cfg
    }

    /// Run the cross-attention stack. `kept` restricts each utterance's keys
    /// to the listed frames (blank pruning); `None` attends to all valid frames.
    pub fn forward(
        &self,
        queries: &Tensor,
        h: &EncoderStates,
        kept: Option<&[Vec<usize>]>,
        mut train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<AcousticScores> {
        if let Some(k) = kept {
            if k.len() != h.lengths.len() {
                return Err(Error::invalid("one kept-frame list per utterance is required"));
            }
            for (i, (frames, &len)) in k.iter().zip(&h.lengths).enumerate() {
                if !frames.iter().any(|&t| t < len) {
                    return Err(Error::invalid(format!("every frame of utterance {i} was pruned")));
                }
            }
        }
        let mask = padding_mask(&h.lengths, h.values.dim(1)?, kept, self.precision)?;
        let mut x = queries.clone();
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut first_context = None;
        for layer in &self.layers {
            let n = layer.ln_attn.forward(&x)?;
            let out = layer.attn.forward(&n, &h.values, Some(&mask))?;
            first_context.get_or_insert_with(|| out.context.clone());
            weights.push(out.weights);
            let mut a = out.output;
            if let Some(rng) = train_rng.as_deref_mut() {
                a = dropout(&a, self.cfg.dropout, rng)?;
            }
            x = (x + a)?;
            let mut f = layer.ff.forward(&layer.ln_ff.forward(&x)?)?;
            if let Some(rng) = train_rng.as_deref_mut() {
                f = dropout(&f, self.cfg.dropout, rng)?;
            }
            x = (x + f)?;
        }
        let scores = self.head.forward(&self.ln_out.forward(&x)?)?;
        Ok(AcousticScores {
            scores,
            weights,
            first_context: first_context.unwrap_or_else(|| queries.clone()),
        })
    }

    /// `f(x, t)` for every frame `t` of a single utterance, `T' × V` (f64 rows).
    /// Since a step's output depends on its query frame alone, decoding looks
    /// scores up here instead of rerunning the branch per hypothesis.
    pub fn frame_table(&self, h: &EncoderStates, kept: Option<&[usize]>) -> Result<Vec<Vec<f64>>> {
        if h.lengths.len() != 1 {
            return Err(Error::invalid("frame_table takes a single utterance"));
        }
        let len = h.lengths[0];
        let queries = h.values.narrow(1, 0, len)?;
        let kept_owned = kept.map(|k| vec![k.to_vec()]);
        let out = self.forward(&queries, h, kept_owned.as_deref(), None)?;
        Ok(out.scores.get(0)?.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}
