//! The decoder's language-model half: causal self-attention over previous
//! tokens, emitting log probabilities over the label inventory. It takes no
//! acoustic input, which is what lets it be trained, swapped or adapted as an
//! ordinary LM.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{attention_specs, feedforward_specs};
use crate::error::{Error, Result};
use crate::nn::{
    dropout, layer_norm_specs, linear_specs, log_softmax, sinusoidal_positions, tensor_from_f64,
    tensor_to_f64, FeedForward, Init, LayerNorm, MultiHeadAttention, ParamSpec, ParamStore,
    Precision, NEG_MASK,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub feedforward_dim: usize,
    pub tie_embeddings: bool,
    pub dropout: f64,
    /// Start the output projection at zero (uniform predictions before training).
    pub zero_init_head: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            heads: 4,
            feedforward_dim: 256,
            tie_embeddings: false,
            dropout: 0.1,
            zero_init_head: false,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "lm model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("lm dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Token-id layout the decoder needs from the tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    /// Embedding rows (every tokenizer id).
    pub input_size: usize,
    /// Predicted classes: text symbols then eos.
    pub output_classes: usize,
    pub sos: u32,
    pub eos: u32,
    pub blank: u32,
    /// CTC classes: every output class plus blank.
    pub ctc_classes: usize,
}

impl Vocab {
    pub fn from_tokenizer(tok: &crate::corpus::Tokenizer) -> Self {
        Self {
            input_size: tok.vocab_size(),
            output_classes: tok.num_output_classes(),
            sos: tok.sos(),
            eos: tok.eos(),
            blank: tok.blank(),
            ctc_classes: tok.num_ctc_classes(),
        }
    }
}

/// Decoder LM outputs for a batch of sos-prefixed sequences of equal padded length `L`.
#[derive(Debug, Clone)]
pub struct LmOutput {
    /// Pre-softmax scores `d_u`, `B × L × V`.
    pub logits: Tensor,
    /// `log_softmax(d_u)`, `B × L × V`; row `u` depends on inputs `0..=u` only.
    pub log_probs: Tensor,
    /// Final hidden states, `B × L × D`.
    pub hidden: Tensor,
}

#[derive(Debug, Clone)]
struct LmLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct LmDecoder {
    cfg: LmConfig,
    vocab: Vocab,
    embed: Tensor,
    layers: Vec<LmLayer>,
    ln_out: LayerNorm,
    head_weight: Option<Tensor>,
    head_bias: Tensor,
    precision: Precision,
}

impl LmDecoder {
    pub fn param_specs(cfg: &LmConfig, vocab: &Vocab) -> Vec<ParamSpec> {
        let d = cfg.model_dim;
        let mut specs = vec![ParamSpec::new("lm.embed", &[vocab.input_size, d], Init::Normal(1.0))];
        for i in 0..cfg.layers {
            let p = format!("lm.layers.{i}");
            layer_norm_specs(&mut specs, &format!("{p}.ln_attn"), d);
            attention_specs(&mut specs, &format!("{p}.attn"), d);
            layer_norm_specs(&mut specs, &format!("{p}.ln_ff"), d);
            feedforward_specs(&mut specs, &format!("{p}.ff"), d, cfg.feedforward_dim);
        }
        layer_norm_specs(&mut specs, "lm.ln_out", d);
        if cfg.tie_embeddings {
            specs.push(ParamSpec::new("lm.head.bias", &[vocab.output_classes], Init::Zeros));
        } else {
            linear_specs(&mut specs, "lm.head", d, vocab.output_classes);
            if cfg.zero_init_head {
                let w = specs.iter_mut().find(|s| s.name == "lm.head.weight").unwrap();
                w.init = Init::Zeros;
            }
        }
        specs
    }

    pub fn load(cfg: &LmConfig, vocab: Vocab, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("lm.layers.{i}");
                Ok(LmLayer {
                    ln_attn: LayerNorm::load(store, &format!("{p}.ln_attn"))?,
                    attn: MultiHeadAttention::load(store, &format!("{p}.attn"), cfg.heads)?,
                    ln_ff: LayerNorm::load(store, &format!("{p}.ln_ff"))?,
                    ff: FeedForward::load(store, &format!("{p}.ff"))?,
                })
            })
            .collect::<Result<_>>()?;
        let embed = store.get("lm.embed")?;
        let head_weight = if cfg.tie_embeddings {
            None
        } else {
            Some(store.get("lm.head.weight")?)
        };
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            embed,
            layers,
            ln_out: LayerNorm::load(store, "lm.ln_out")?,
            head_weight,
            head_bias: store.get("lm.head.bias")?,
            precision: store.precision(),
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn check_inputs(&self, inputs: &[Vec<u32>]) -> Result<()> {
        if inputs.is_empty() || inputs.iter().any(Vec::is_empty) {
            return Err(Error::invalid("LM input must be a nonempty batch of nonempty sequences"));
        }
        for seq in inputs {
            if seq[0] != self.vocab.sos {
                return Err(Error::invalid("LM input must start with sos"));
            }
            if let Some(bad) = seq.iter().find(|&&t| t as usize >= self.vocab.input_size) {
                return Err(Error::invalid(format!("token id {bad} outside the vocabulary")));
            }
        }
        Ok(())
    }

    /// Forward a batch of sos-prefixed sequences (right-padded internally).
    pub fn forward(&self, inputs: &[Vec<u32>], mut train_rng: Option<&mut ChaCha8Rng>) -> Result<LmOutput> {
        self.check_inputs(inputs)?;
        let b = inputs.len();
        let len = inputs.iter().map(Vec::len).max().unwrap();
        let d = self.cfg.model_dim;
        let mut ids = Vec::with_capacity(b * len);
        for seq in inputs {
            ids.extend_from_slice(seq);
            ids.extend(std::iter::repeat(self.vocab.eos).take(len - seq.len()));
        }
        let ids = Tensor::from_vec(ids, b * len, self.embed.device())?;
        let pos = sinusoidal_positions(len, d, self.precision)?;
        let mut x = self
            .embed
            .index_select(&ids, 0)?
            .reshape((b, len, d))?
            .broadcast_add(&pos)?;

        let mut causal = vec![0.0; len * len];
        for q in 0..len {
            for k in q + 1..len {
                causal[q * len + k] = NEG_MASK;
            }
        }
        let mask = tensor_from_f64(causal, &[1, 1, len, len], self.precision)?;
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
        let hidden = self.ln_out.forward(&x)?;
        let head = match &self.head_weight {
            Some(w) => w.clone(),
            None => self.embed.narrow(0, 0, self.vocab.output_classes)?.t()?,
        };
        let logits = hidden
            .reshape((b * len, d))?
            .matmul(&head)?
            .broadcast_add(&self.head_bias)?
            .reshape((b, len, self.vocab.output_classes))?;
        let log_probs = log_softmax(&logits)?;
        Ok(LmOutput {
            logits,
            log_probs,
            hidden,
        })
    }

    /// Sum over steps of `-log p(y_u | y_<u)` for each transcript, eos included.
    pub fn nll_batch(&self, transcripts: &[&[u32]]) -> Result<Vec<f64>> {
        let inputs: Vec<Vec<u32>> = transcripts
            .iter()
            .map(|t| std::iter::once(self.vocab.sos).chain(t.iter().copied()).collect())
            .collect();
        for t in transcripts {
            if let Some(bad) = t.iter().find(|&&id| id as usize >= self.vocab.output_classes || id == self.vocab.eos) {
                return Err(Error::invalid(format!("transcript token {bad} is not a text symbol")));
            }
        }
        let out = self.forward(&inputs, None)?;
        let lp = out.log_probs.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        Ok(transcripts
            .iter()
            .zip(&lp)
            .map(|(t, rows)| {
                t.iter()
                    .copied()
                    .chain(std::iter::once(self.vocab.eos))
                    .enumerate()
                    .map(|(u, y)| -rows[u][y as usize])
                    .sum()
            })
            .collect())
    }

    pub fn nll(&self, transcript: &[u32]) -> Result<f64> {
        Ok(self.nll_batch(&[transcript])?[0])
    }

    /// `exp(total nll / total predicted tokens)`, eos counted, in batches.
    pub fn perplexity(&self, transcripts: &[Vec<u32>], batch_size: usize) -> Result<f64> {
        if transcripts.is_empty() {
            return Err(Error::invalid("perplexity needs a nonempty corpus"));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in transcripts.chunks(batch_size.max(1)) {
            let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
            total += self.nll_batch(&refs)?.iter().sum::<f64>();
            count += chunk.iter().map(|t| t.len() + 1).sum::<usize>();
        }
        Ok((total / count as f64).exp())
    }

    /// `log_softmax(d)` at the last position of each prefix (prefixes exclude sos).
    pub fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.next_step(prefixes)?.0)
    }

    /// Next-step log probabilities and final hidden state for each prefix.
    pub fn next_step(&self, prefixes: &[&[u32]]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let inputs: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| std::iter::once(self.vocab.sos).chain(p.iter().copied()).collect())
            .collect();
        let out = self.forward(&inputs, None)?;
        let lp = out.log_probs.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let hidden = out.hidden.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let mut rows = Vec::with_capacity(prefixes.len());
        let mut states = Vec::with_capacity(prefixes.len());
        for (i, p) in prefixes.iter().enumerate() {
            rows.push(lp[i][p.len()].clone());
            states.push(hidden[i][p.len()].clone());
        }
        Ok((rows, states))
    }

    pub fn flat_log_probs(out: &LmOutput) -> Result<Vec<f64>> {
        tensor_to_f64(&out.log_probs)
    }
}

/// Anything that yields next-token log probabilities over the label inventory.
///
/// The HAED joint posterior only needs this from its LM half, so the neural
/// decoder LM can be swapped for an n-gram model or any other implementation
/// sharing the vocabulary.
pub trait LanguageModel {
    fn num_classes(&self) -> usize;

    /// For each prefix of previous labels (sos excluded), log P(next | prefix).
    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>>;
}

impl LanguageModel for LmDecoder {
    fn num_classes(&self) -> usize {
        self.vocab.output_classes
    }

    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        LmDecoder::next_log_probs(self, prefixes)
    }
}
