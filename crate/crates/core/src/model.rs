//! The full recognizer: encoder, CTC head, decoder LM and acoustic branch,
//! with the joint posterior `softmax(c_u + log_softmax(d_u))` and the
//! multi-task training loss.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{gather_queries, AcousticBranch, AcousticConfig};
use crate::corpus::{FeatureSequence, Tokenizer};
use crate::ctc::{CtcLattice, CtcPosteriors};
use crate::encoder::{Encoder, EncoderConfig, EncoderStates};
use crate::error::{Error, Result};
use crate::lm_decoder::{LmConfig, LmDecoder, Vocab};
use crate::nn::{linear_specs, log_softmax, tensor_from_f64, Linear, ParamSpec, ParamStore, Precision};
use crate::util;

/// Which decoder the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// LM half plus acoustic half combined in the joint posterior.
    #[default]
    Haed,
    /// Acoustic half only: posterior `softmax(c_u)`.
    NoDecoder,
    /// Conventional decoder: the acoustic branch is queried with the LM's
    /// hidden states, so the token history feeds the attention.
    Aed,
}

impl Variant {
    pub fn has_lm(self) -> bool {
        self != Variant::NoDecoder
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Haed => "haed",
            Variant::NoDecoder => "no_decoder",
            Variant::Aed => "aed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub acoustic: AcousticConfig,
    pub variant: Variant,
    /// Weight of the decoder LM loss.
    pub lambda: f64,
    /// Weight of the CTC loss (training) and CTC prefix score (decoding).
    pub beta: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            lm: LmConfig::default(),
            acoustic: AcousticConfig::default(),
            variant: Variant::Haed,
            lambda: 0.8,
            beta: 0.2,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lm.validate()?;
        self.acoustic.validate(self.encoder.model_dim)?;
        if self.lm.model_dim != self.encoder.model_dim {
            return Err(Error::Config(format!(
                "lm model_dim {} must equal encoder model_dim {}",
                self.lm.model_dim, self.encoder.model_dim
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("beta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Loss values for one batch, averaged over the utterances that fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub lm: f64,
    pub ctc: f64,
    pub valid: usize,
    /// Utterances whose labels did not fit the encoder frames.
    pub skipped: Vec<String>,
}

#[derive(Debug)]
pub struct LossOutput {
    /// Differentiable objective with the gradient of `terms.total`; `None`
    /// when every utterance was skipped.
    pub objective: Option<Tensor>,
    pub terms: LossTerms,
    /// Emission frames used for each valid utterance.
    pub alignments: Vec<Vec<usize>>,
    /// Batch positions of the valid utterances.
    pub valid: Vec<usize>,
    /// Encoder frames per utterance (whole batch).
    pub frames: Vec<usize>,
    /// `B × T' × ctc_classes` log posteriors (whole batch).
    pub ctc_log_probs: Option<Tensor>,
    /// `B_valid × (U+1) × V` joint log posteriors.
    pub joint_log_probs: Option<Tensor>,
    /// `B_valid × (U+1) × V` decoder-LM log probabilities, when the variant has one.
    pub lm_log_probs: Option<Tensor>,
}

/// Teacher-forced posterior rows of one utterance, trimmed to its lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorRows {
    pub ctc: Vec<Vec<f64>>,
    pub joint: Vec<Vec<f64>>,
    pub lm: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct HaedModel {
    cfg: ModelConfig,
    vocab: Vocab,
    store: ParamStore,
    encoder: Encoder,
    ctc_head: Linear,
    lm: Option<LmDecoder>,
    acoustic: AcousticBranch,
}

impl HaedModel {
    pub fn param_specs(cfg: &ModelConfig, vocab: &Vocab) -> Vec<ParamSpec> {
        let mut specs = Encoder::param_specs(&cfg.encoder);
        linear_specs(&mut specs, "ctc.head", cfg.encoder.model_dim, vocab.ctc_classes);
        if cfg.variant.has_lm() {
            specs.extend(LmDecoder::param_specs(&cfg.lm, vocab));
        }
        specs.extend(AcousticBranch::param_specs(
            &cfg.acoustic,
            cfg.encoder.model_dim,
            vocab.output_classes,
        ));
        specs
    }

    pub fn new(cfg: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::initialize(&Self::param_specs(cfg, &vocab), cfg.precision, seed)?;
        Self::from_store(cfg, vocab, store)
    }

    pub fn for_tokenizer(cfg: &ModelConfig, tok: &Tokenizer, seed: u64) -> Result<Self> {
        Self::new(cfg, Vocab::from_tokenizer(tok), seed)
    }

    pub fn from_store(cfg: &ModelConfig, vocab: Vocab, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        if vocab.blank as usize >= vocab.ctc_classes {
            return Err(Error::Config("blank id must index a CTC class".into()));
        }
        Ok(Self {
            encoder: Encoder::load(&cfg.encoder, &store)?,
            ctc_head: Linear::load(&store, "ctc.head")?,
            lm: if cfg.variant.has_lm() {
                Some(LmDecoder::load(&cfg.lm, vocab, &store)?)
            } else {
                None
            },
            acoustic: AcousticBranch::load(&cfg.acoustic, &store)?,
            cfg: cfg.clone(),
            vocab,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn lm(&self) -> Option<&LmDecoder> {
        self.lm.as_ref()
    }

    pub fn acoustic(&self) -> &AcousticBranch {
        &self.acoustic
    }

    pub fn encode(&self, feats: &[&FeatureSequence], train_rng: Option<&mut ChaCha8Rng>) -> Result<EncoderStates> {
        self.encoder.encode(feats, train_rng)
    }

    /// CTC log posteriors as a `B × T' × C` tensor.
    pub fn ctc_log_probs(&self, h: &EncoderStates) -> Result<Tensor> {
        log_softmax(&self.ctc_head.forward(&h.values)?)
    }

    /// Per-utterance CTC posteriors over valid frames, at 64-bit.
    pub fn ctc_posteriors(&self, h: &EncoderStates) -> Result<Vec<CtcPosteriors>> {
        let lp = self.ctc_log_probs(h)?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        lp.into_iter()
            .zip(&h.lengths)
            .map(|(rows, &len)| {
                let flat: Vec<f64> = rows.into_iter().take(len).flatten().collect();
                CtcPosteriors::new(flat, len, self.vocab.ctc_classes, self.vocab.blank as usize)
            })
            .collect()
    }

    fn targets_mask(&self, labels: &[&[u32]], steps: usize) -> Result<Tensor> {
        let v = self.vocab.output_classes;
        let mut m = vec![0.0; labels.len() * steps * v];
        for (b, y) in labels.iter().enumerate() {
            for (u, &tok) in y.iter().chain(std::iter::once(&self.vocab.eos)).enumerate() {
                m[(b * steps + u) * v + tok as usize] = 1.0;
            }
        }
        tensor_from_f64(m, &[labels.len(), steps, v], self.cfg.precision)
    }

    /// Teacher-forced loss for a batch. Emission frames come from the current
    /// CTC branch's forced alignment and carry no gradient.
    pub fn loss(
        &self,
        feats: &[&FeatureSequence],
        labels: &[&[u32]],
        mut train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossOutput> {
        if feats.len() != labels.len() || feats.is_empty() {
            return Err(Error::invalid("loss needs one label sequence per utterance"));
        }
        for y in labels {
            if let Some(bad) = y.iter().find(|&&t| t >= self.vocab.eos) {
                return Err(Error::invalid(format!("label {bad} is not a text symbol")));
            }
        }
        let h = self.encode(feats, train_rng.as_deref_mut())?;
        let ctc_lp = self.ctc_log_probs(&h)?;
        let ctc_rows = ctc_lp.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let t_max = h.max_frames();
        let classes = self.vocab.ctc_classes;

        let mut grad = vec![0.0; feats.len() * t_max * classes];
        let mut ctc_sum = 0.0;
        let mut valid = Vec::new();
        let mut alignments = Vec::new();
        let mut skipped = Vec::new();
        for (b, y) in labels.iter().enumerate() {
            let len = h.lengths[b];
            let flat: Vec<f64> = ctc_rows[b].iter().take(len).flatten().copied().collect();
            let post = CtcPosteriors::new(flat, len, classes, self.vocab.blank as usize)?;
            match CtcLattice::new(&post, y) {
                Ok(lattice) => {
                    ctc_sum += lattice.loss();
                    let g = lattice.grad_log_probs(classes);
                    let base = b * t_max * classes;
                    grad[base..base + g.len()].copy_from_slice(&g);
                    alignments.push(lattice.alignment().frames);
                    valid.push(b);
                }
                Err(Error::SequenceTooLong { .. }) => skipped.push(feats[b].id.clone()),
                Err(e) => return Err(e),
            }
        }
        if valid.is_empty() {
            return Ok(LossOutput {
                objective: None,
                terms: LossTerms {
                    total: 0.0,
                    ce: 0.0,
                    lm: 0.0,
                    ctc: 0.0,
                    valid: 0,
                    skipped,
                },
                alignments,
                valid,
                frames: h.lengths.clone(),
                ctc_log_probs: Some(ctc_lp),
                joint_log_probs: None,
                lm_log_probs: None,
            });
        }

        let n = valid.len() as f64;
        let grad = tensor_from_f64(grad, &[feats.len(), t_max, classes], self.cfg.precision)?;
        // gradient of the summed CTC loss through the log posteriors
        let ctc_surrogate = (&ctc_lp * grad)?.sum_all()?;

        let index = Tensor::from_vec(valid.iter().map(|&b| b as u32).collect::<Vec<_>>(), valid.len(), h.values.device())?;
        let hv = EncoderStates {
            values: h.values.index_select(&index, 0)?,
            lengths: valid.iter().map(|&b| h.lengths[b]).collect(),
            ids: valid.iter().map(|&b| h.ids[b].clone()).collect(),
        };
        let vlabels: Vec<&[u32]> = valid.iter().map(|&b| labels[b]).collect();
        let steps = vlabels.iter().map(|y| y.len() + 1).max().unwrap();
        let mask = self.targets_mask(&vlabels, steps)?;
        let inputs: Vec<Vec<u32>> = vlabels
            .iter()
            .map(|y| std::iter::once(self.vocab.sos).chain(y.iter().copied()).collect())
            .collect();

        let (joint, lm_lp) = match self.cfg.variant {
            Variant::Haed => {
                let lm = self.lm.as_ref().expect("haed has an lm");
                let d = lm.forward(&inputs, train_rng.as_deref_mut())?;
                let q = gather_queries(&hv, &alignments, self.cfg.acoustic.sos_frame)?;
                let c = self.acoustic.forward(&q, &hv, None, train_rng.as_deref_mut())?;
                (log_softmax(&(c.scores + &d.log_probs)?)?, Some(d.log_probs))
            }
            Variant::NoDecoder => {
                let q = gather_queries(&hv, &alignments, self.cfg.acoustic.sos_frame)?;
                let c = self.acoustic.forward(&q, &hv, None, train_rng.as_deref_mut())?;
                (log_softmax(&c.scores)?, None)
            }
            Variant::Aed => {
                let lm = self.lm.as_ref().expect("aed has an lm");
                let d = lm.forward(&inputs, train_rng.as_deref_mut())?;
                let c = self.acoustic.forward(&d.hidden, &hv, None, train_rng.as_deref_mut())?;
                (log_softmax(&c.scores)?, None)
            }
        };
        let ce_t = (&joint * &mask)?.sum_all()?.neg()?;
        let lm_rows = lm_lp.clone();
        let ce = ce_t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let mut objective = ce_t;
        let mut lm_value = 0.0;
        if let Some(lp) = lm_lp {
            let lm_t = (lp * &mask)?.sum_all()?.neg()?;
            lm_value = lm_t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if self.cfg.lambda != 0.0 {
                objective = (objective + (lm_t * self.cfg.lambda)?)?;
            }
        }
        if self.cfg.beta != 0.0 {
            objective = (objective + (ctc_surrogate * self.cfg.beta)?)?;
        }
        let objective = (objective / n)?;
        let terms = LossTerms {
            ce: ce / n,
            lm: lm_value / n,
            ctc: ctc_sum / n,
            total: (ce + self.cfg.lambda * lm_value + self.cfg.beta * ctc_sum) / n,
            valid: valid.len(),
            skipped,
        };
        if !terms.total.is_finite() {
            return Err(Error::invalid(format!("non-finite loss {:?}", terms)));
        }
        Ok(LossOutput {
            objective: Some(objective),
            terms,
            alignments,
            valid,
            frames: h.lengths.clone(),
            ctc_log_probs: Some(ctc_lp),
            joint_log_probs: Some(joint),
            lm_log_probs: lm_rows,
        })
    }

    /// Evaluation-mode posterior rows for each utterance that fits its frames
    /// (`None` for skipped ones).
    pub fn posterior_rows(&self, feats: &[&FeatureSequence], labels: &[&[u32]]) -> Result<Vec<Option<PosteriorRows>>> {
        let out = self.loss(feats, labels, None)?;
        let to_rows = |t: &Option<Tensor>| -> Result<Option<Vec<Vec<Vec<f64>>>>> {
            t.as_ref()
                .map(|t| Ok(t.to_dtype(DType::F64)?.to_vec3::<f64>()?))
                .transpose()
        };
        let ctc = to_rows(&out.ctc_log_probs)?.expect("loss always returns CTC rows");
        let joint = to_rows(&out.joint_log_probs)?;
        let lm = to_rows(&out.lm_log_probs)?;
        let mut rows = vec![None; feats.len()];
        for (i, &b) in out.valid.iter().enumerate() {
            let steps = labels[b].len() + 1;
            rows[b] = Some(PosteriorRows {
                ctc: ctc[b][..out.frames[b]].to_vec(),
                joint: joint.as_ref().map_or_else(Vec::new, |j| j[i][..steps].to_vec()),
                lm: lm.as_ref().map_or_else(Vec::new, |l| l[i][..steps].to_vec()),
            });
        }
        Ok(rows)
    }

    /// Full acoustic score table `f(x, t)` for one utterance, `T' × V`.
    pub fn acoustic_table(&self, h: &EncoderStates, kept: Option<&[usize]>) -> Result<Vec<Vec<f64>>> {
        self.acoustic.frame_table(h, kept)
    }

    /// Conventional-decoder step: next-token log posteriors for each prefix,
    /// attending over one utterance's encoder states.
    pub fn aed_next_log_probs(
        &self,
        h: &EncoderStates,
        kept: Option<&[usize]>,
        prefixes: &[&[u32]],
    ) -> Result<Vec<Vec<f64>>> {
        let lm = self.lm.as_ref().ok_or_else(|| Error::invalid("model has no decoder LM"))?;
        let (_, hidden) = lm.next_step(prefixes)?;
        let k = prefixes.len();
        let d = self.cfg.encoder.model_dim;
        let flat: Vec<f64> = hidden.into_iter().flatten().collect();
        let q = tensor_from_f64(flat, &[k, 1, d], self.cfg.precision)?;
        let hb = EncoderStates {
            values: h.values.broadcast_as((k, h.values.dim(1)?, d))?.contiguous()?,
            lengths: vec![h.lengths[0]; k],
            ids: vec![h.ids[0].clone(); k],
        };
        let kept_b = kept.map(|f| vec![f.to_vec(); k]);
        let out = self.acoustic.forward(&q, &hb, kept_b.as_deref(), None)?;
        let rows = out.scores.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        Ok(rows.into_iter().map(|r| util::log_softmax(&r[0])).collect())
    }
}

/// `log_softmax(c + log_d)`, the joint log posterior for one step.
pub fn joint_log_posterior(acoustic: &[f64], lm_log_probs: &[f64]) -> Result<Vec<f64>> {
    if acoustic.len() != lm_log_probs.len() || acoustic.is_empty() {
        return Err(Error::invalid("acoustic and LM rows must have the same nonzero length"));
    }
    if acoustic.iter().chain(lm_log_probs).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite score in joint posterior"));
    }
    let sum: Vec<f64> = acoustic.iter().zip(lm_log_probs).map(|(c, d)| c + d).collect();
    Ok(util::log_softmax(&sum))
}

/// `softmax(c + log_d)` as probabilities.
pub fn joint_posterior(acoustic: &[f64], lm_log_probs: &[f64]) -> Result<Vec<f64>> {
    Ok(joint_log_posterior(acoustic, lm_log_probs)?.into_iter().map(f64::exp).collect())
}

/// Internal-LM log probability of a transcript (eos included). The decoder LM
/// has no acoustic input, so this is exactly its sequence log-likelihood.
pub fn ilm_log_prob(model: &HaedModel, tokens: &[u32]) -> Result<f64> {
    let lm = model.lm().ok_or_else(|| Error::invalid("model has no decoder LM"))?;
    Ok(-lm.nll(tokens)?)
}
