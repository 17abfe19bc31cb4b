//! Label-synchronous joint attention/CTC beam search with per-hypothesis
//! alignment tracking, plus shallow fusion and density-ratio scoring.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureSequence, Manifest, Tokenizer};
use crate::ctc::{prune_blank_frames, CtcPosteriors, PrefixState};
use crate::encoder::EncoderStates;
use crate::error::{Error, Result};
use crate::lm_decoder::LanguageModel;
use crate::model::{joint_log_posterior, HaedModel, Variant};
use crate::util::{self, write_json_lines};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    None,
    Shallow,
    DensityRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub target_weight: f64,
    pub source_weight: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::None,
            target_weight: 0.1,
            source_weight: 0.1,
        }
    }
}

impl FusionConfig {
    pub fn shallow(weight: f64) -> Self {
        Self {
            mode: FusionMode::Shallow,
            target_weight: weight,
            source_weight: 0.0,
        }
    }

    pub fn density_ratio(target: f64, source: f64) -> Self {
        Self {
            mode: FusionMode::DensityRatio,
            target_weight: target,
            source_weight: source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_weight >= 0.0 && self.source_weight >= 0.0) {
            return Err(Error::Config("fusion weights must be >= 0".into()));
        }
        Ok(())
    }

    fn weights(&self) -> (f64, f64) {
        match self.mode {
            FusionMode::None => (0.0, 0.0),
            FusionMode::Shallow => (self.target_weight, 0.0),
            FusionMode::DensityRatio => (self.target_weight, self.source_weight),
        }
    }
}

/// External LMs used by fusion.
#[derive(Clone, Copy, Default)]
pub struct FusionLms<'a> {
    pub target: Option<&'a dyn LanguageModel>,
    pub source: Option<&'a dyn LanguageModel>,
}

impl FusionLms<'_> {
    fn check(&self, cfg: &FusionConfig) -> Result<()> {
        match cfg.mode {
            FusionMode::None => Ok(()),
            FusionMode::Shallow if self.target.is_none() => Err(Error::invalid("shallow fusion needs a target LM")),
            FusionMode::DensityRatio if self.target.is_none() || self.source.is_none() => {
                Err(Error::invalid("density ratio needs target and source LMs"))
            }
            _ => Ok(()),
        }
    }
}

/// `log p_model + w_t log p_tgt - w_s log p_src`, per class.
pub fn fused_step_score(
    model_log_probs: &[f64],
    target: Option<&[f64]>,
    source: Option<&[f64]>,
    cfg: &FusionConfig,
) -> Result<Vec<f64>> {
    let (wt, ws) = cfg.weights();
    let mut row = model_log_probs.to_vec();
    let mut add = |other: Option<&[f64]>, w: f64, what: &str| -> Result<()> {
        let o = other.ok_or_else(|| Error::invalid(format!("fusion mode needs a {what} LM row")))?;
        if o.len() != row.len() {
            return Err(Error::invalid(format!("{what} LM row has the wrong length")));
        }
        row.iter_mut().zip(o).for_each(|(r, v)| *r += w * v);
        Ok(())
    };
    match cfg.mode {
        FusionMode::None => {}
        FusionMode::Shallow => add(target, wt, "target")?,
        FusionMode::DensityRatio => {
            add(target, wt, "target")?;
            add(source, -ws, "source")?;
        }
    }
    Ok(row)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    /// CTC weight; `None` uses the model's training weight.
    pub beta: Option<f64>,
    /// Blank-probability threshold for dropping frames from cross-attention.
    pub prune_threshold: Option<f64>,
    pub fusion: FusionConfig,
    /// Divide final scores by output length (eos included) when ranking.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            beta: None,
            prune_threshold: Some(0.95),
            fusion: FusionConfig::default(),
            length_normalize: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(Error::invalid("beam size must be >= 1"));
        }
        if let Some(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Config("decode beta must lie in [0, 1]".into()));
            }
        }
        self.fusion.validate()
    }
}

/// A beam entry. The total is recomputable from the components.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of model log posteriors (eos included once ended).
    pub attention: f64,
    /// CTC prefix score, or the full-sequence score once ended.
    pub ctc: f64,
    /// Sum of target-LM log probabilities.
    pub lm_target: f64,
    /// Sum of source-LM log probabilities.
    pub lm_source: f64,
    pub score: f64,
    pub ctc_state: PrefixState,
    pub ended: bool,
}

impl Hypothesis {
    pub fn total(&self, beta: f64, fusion: &FusionConfig) -> f64 {
        let (wt, ws) = fusion.weights();
        (1.0 - beta) * self.attention + beta * self.ctc + wt * self.lm_target - ws * self.lm_source
    }

    /// Length-normalized score used for final ranking.
    pub fn normalized(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.score / (self.tokens.len() + 1) as f64
        } else {
            self.score
        }
    }

    /// The frame whose encoder state queries the acoustic branch next.
    pub fn query_frame(&self, sos_frame: usize) -> usize {
        self.ctc_state.last_emission_frame.unwrap_or(sos_frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Ended hypotheses, best first.
    pub nbest: Vec<Hypothesis>,
    /// Set when no hypothesis reached eos (the transcript is then empty).
    pub flagged: bool,
    /// Per step: fraction of running hypotheses sharing the best one's last emission frame.
    pub shared_frame_fraction: Vec<f64>,
    pub kept_frames: usize,
    pub frames: usize,
}

impl DecodeResult {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.nbest.first()
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.best().map(|h| h.tokens.clone()).unwrap_or_default()
    }
}

/// Per-utterance quantities shared by every hypothesis.
pub struct Prepared {
    pub h: EncoderStates,
    pub post: CtcPosteriors,
    /// Frames kept for cross-attention.
    pub kept: Vec<usize>,
    /// HAED / no-decoder acoustic score per query frame.
    pub table: Option<Vec<Vec<f64>>>,
}

pub struct Decoder<'a> {
    pub model: &'a HaedModel,
    pub cfg: DecodeConfig,
    pub lms: FusionLms<'a>,
    /// Replace the decoder LM of a HAED model by any LM over the same classes.
    pub lm_override: Option<&'a dyn LanguageModel>,
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a HaedModel, cfg: DecodeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            cfg,
            lms: FusionLms::default(),
            lm_override: None,
        })
    }

    pub fn with_lms(mut self, lms: FusionLms<'a>) -> Result<Self> {
        lms.check(&self.cfg.fusion)?;
        self.lms = lms;
        Ok(self)
    }

    pub fn with_lm_override(mut self, lm: &'a dyn LanguageModel) -> Result<Self> {
        if self.model.config().variant != Variant::Haed {
            return Err(Error::invalid("only the HAED decoder LM can be swapped"));
        }
        if lm.num_classes() != self.model.vocab().output_classes {
            return Err(Error::invalid("replacement LM has a different class count"));
        }
        self.lm_override = Some(lm);
        Ok(self)
    }

    pub fn beta(&self) -> f64 {
        self.cfg.beta.unwrap_or(self.model.config().beta)
    }

    pub fn prepare(&self, feats: &FeatureSequence) -> Result<Prepared> {
        let h = self.model.encode(&[feats], None)?;
        let post = self.model.ctc_posteriors(&h)?.remove(0);
        let kept = match self.cfg.prune_threshold {
            Some(th) => prune_blank_frames(&post, th)?,
            None => (0..post.frames()).collect(),
        };
        let table = if self.model.config().variant != Variant::Aed && !kept.is_empty() {
            Some(self.model.acoustic_table(&h, Some(&kept))?)
        } else {
            None
        };
        Ok(Prepared { h, post, kept, table })
    }

    /// Model log posterior rows for each hypothesis.
    pub fn model_rows(&self, prep: &Prepared, hyps: &[&Hypothesis]) -> Result<Vec<Vec<f64>>> {
        let prefixes: Vec<&[u32]> = hyps.iter().map(|h| h.tokens.as_slice()).collect();
        let sos_frame = self.model.config().acoustic.sos_frame;
        match self.model.config().variant {
            Variant::Haed => {
                let table = prep.table.as_ref().expect("table prepared");
                let lm_rows = match self.lm_override {
                    Some(lm) => lm.next_log_probs(&prefixes)?,
                    None => self.model.lm().expect("haed has an lm").next_log_probs(&prefixes)?,
                };
                hyps.iter()
                    .zip(lm_rows)
                    .map(|(h, d)| joint_log_posterior(&table[h.query_frame(sos_frame)], &d))
                    .collect()
            }
            Variant::NoDecoder => {
                let table = prep.table.as_ref().expect("table prepared");
                Ok(hyps
                    .iter()
                    .map(|h| util::log_softmax(&table[h.query_frame(sos_frame)]))
                    .collect())
            }
            Variant::Aed => self.model.aed_next_log_probs(&prep.h, Some(&prep.kept), &prefixes),
        }
    }

    fn fusion_rows(&self, hyps: &[&Hypothesis]) -> Result<(Option<Vec<Vec<f64>>>, Option<Vec<Vec<f64>>>)> {
        let prefixes: Vec<&[u32]> = hyps.iter().map(|h| h.tokens.as_slice()).collect();
        let mode = self.cfg.fusion.mode;
        let target = match self.lms.target {
            Some(lm) if mode != FusionMode::None => Some(lm.next_log_probs(&prefixes)?),
            _ => None,
        };
        let source = match self.lms.source {
            Some(lm) if mode == FusionMode::DensityRatio => Some(lm.next_log_probs(&prefixes)?),
            _ => None,
        };
        Ok((target, source))
    }

    /// Every one-token extension of every running hypothesis, scored.
    fn expand(&self, prep: &Prepared, hyps: &[Hypothesis]) -> Result<Vec<Hypothesis>> {
        let refs: Vec<&Hypothesis> = hyps.iter().collect();
        let rows = self.model_rows(prep, &refs)?;
        let (tgt, src) = self.fusion_rows(&refs)?;
        let beta = self.beta();
        let eos = self.model.vocab().eos;
        let classes = self.model.vocab().output_classes;
        let mut out = Vec::with_capacity(hyps.len() * classes);
        for (i, hyp) in hyps.iter().enumerate() {
            for c in 0..classes as u32 {
                let (ctc, state, ended) = if c == eos {
                    (hyp.ctc_state.full_score(), hyp.ctc_state.clone(), true)
                } else {
                    let st = hyp.ctc_state.extend(c, &prep.post);
                    if st.exhausted {
                        continue;
                    }
                    (st.score, st, false)
                };
                if ctc == f64::NEG_INFINITY && beta > 0.0 {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                if !ended {
                    tokens.push(c);
                }
                let mut next = Hypothesis {
                    tokens,
                    attention: hyp.attention + rows[i][c as usize],
                    ctc,
                    lm_target: hyp.lm_target + tgt.as_ref().map_or(0.0, |r| r[i][c as usize]),
                    lm_source: hyp.lm_source + src.as_ref().map_or(0.0, |r| r[i][c as usize]),
                    score: 0.0,
                    ctc_state: state,
                    ended,
                };
                next.score = next.total(beta, &self.cfg.fusion);
                if next.score.is_finite() {
                    out.push(next);
                }
            }
        }
        Ok(out)
    }

    fn root(&self, prep: &Prepared) -> Hypothesis {
        Hypothesis {
            tokens: Vec::new(),
            attention: 0.0,
            ctc: 0.0,
            lm_target: 0.0,
            lm_source: 0.0,
            score: 0.0,
            ctc_state: PrefixState::initial(&prep.post),
            ended: false,
        }
    }

    fn finish(&self, prep: &Prepared, mut ended: Vec<Hypothesis>, shared: Vec<f64>) -> DecodeResult {
        let norm = self.cfg.length_normalize;
        ended.sort_by(|a, b| {
            b.normalized(norm)
                .partial_cmp(&a.normalized(norm))
                .unwrap_or(Ordering::Equal)
                .then_with(|| rank(a, b))
        });
        DecodeResult {
            flagged: ended.is_empty(),
            nbest: ended,
            shared_frame_fraction: shared,
            kept_frames: prep.kept.len(),
            frames: prep.post.frames(),
        }
    }

    pub fn beam_search(&self, feats: &FeatureSequence) -> Result<DecodeResult> {
        let prep = self.prepare(feats)?;
        self.beam_search_prepared(&prep)
    }

    pub fn beam_search_prepared(&self, prep: &Prepared) -> Result<DecodeResult> {
        if prep.kept.is_empty() {
            return Ok(self.finish(prep, Vec::new(), Vec::new()));
        }
        let beam = self.cfg.beam;
        let sos_frame = self.model.config().acoustic.sos_frame;
        let max_steps = prep.post.frames() + 1;
        let mut running = vec![self.root(prep)];
        let mut ended = Vec::new();
        let mut shared = Vec::new();
        for _ in 0..max_steps {
            if running.is_empty() || ended.len() >= beam {
                break;
            }
            let mut cands = self.expand(prep, &running)?;
            cands.sort_by(rank);
            cands.truncate(beam);
            running = Vec::with_capacity(beam);
            for c in cands {
                if c.ended {
                    ended.push(c);
                } else {
                    running.push(c);
                }
            }
            if let Some(top) = running.first() {
                let f = top.query_frame(sos_frame);
                let same = running.iter().filter(|h| h.query_frame(sos_frame) == f).count();
                shared.push(same as f64 / running.len() as f64);
            }
        }
        Ok(self.finish(prep, ended, shared))
    }

    /// Greedy joint decoding: the single best-scoring extension at each step.
    pub fn greedy_search(&self, feats: &FeatureSequence) -> Result<DecodeResult> {
        let prep = self.prepare(feats)?;
        if prep.kept.is_empty() {
            return Ok(self.finish(&prep, Vec::new(), Vec::new()));
        }
        let mut hyp = self.root(&prep);
        for _ in 0..=prep.post.frames() {
            let cands = self.expand(&prep, std::slice::from_ref(&hyp))?;
            let Some(best) = cands.into_iter().min_by(rank) else {
                return Ok(self.finish(&prep, Vec::new(), Vec::new()));
            };
            if best.ended {
                return Ok(self.finish(&prep, vec![best], Vec::new()));
            }
            hyp = best;
        }
        Ok(self.finish(&prep, Vec::new(), Vec::new()))
    }
}

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub id: String,
    pub domain: String,
    pub tokens: Vec<u32>,
    pub text: String,
    pub score: f64,
    pub attention: f64,
    pub ctc: f64,
    pub lm_target: f64,
    pub lm_source: f64,
    /// No hypothesis ended, or decoding failed.
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Decode every utterance of a manifest in order. Failures are recorded per
/// utterance and do not stop the run.
pub fn decode_set(decoder: &Decoder<'_>, manifest: &Manifest, tok: &Tokenizer) -> Result<Vec<TranscriptRecord>> {
    let mut out = Vec::with_capacity(manifest.len());
    for rec in &manifest.records {
        let result = manifest.features(rec).and_then(|f| decoder.beam_search(&f));
        let r = match result {
            Ok(res) => {
                let tokens = res.tokens();
                let best = res.best();
                TranscriptRecord {
                    id: rec.id.clone(),
                    domain: rec.domain.clone(),
                    text: tok.decode(&tokens),
                    tokens,
                    score: best.map_or(f64::NEG_INFINITY, |h| h.score),
                    attention: best.map_or(0.0, |h| h.attention),
                    ctc: best.map_or(0.0, |h| h.ctc),
                    lm_target: best.map_or(0.0, |h| h.lm_target),
                    lm_source: best.map_or(0.0, |h| h.lm_source),
                    flagged: res.flagged,
                    error: None,
                }
            }
            Err(e) => TranscriptRecord {
                id: rec.id.clone(),
                domain: rec.domain.clone(),
                tokens: Vec::new(),
                text: String::new(),
                score: f64::NEG_INFINITY,
                attention: 0.0,
                ctc: 0.0,
                lm_target: 0.0,
                lm_source: 0.0,
                flagged: true,
                error: Some(e.to_string()),
            },
        };
        out.push(r);
    }
    Ok(out)
}

pub fn save_transcripts(path: &Path, records: &[TranscriptRecord]) -> Result<()> {
    write_json_lines(path, records)
}

pub fn load_transcripts(path: &Path) -> Result<Vec<TranscriptRecord>> {
    util::read_json_lines(path)
}
