//! Internal-LM diagnostics: the constant-acoustics identity and the measured
//! rate at which competing beam hypotheses share their last emission frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::decoding::{DecodeConfig, Decoder};
use crate::error::{Error, Result};
use crate::model::{joint_posterior, HaedModel};
use crate::util::{rng_for, softmax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlmReport {
    pub probes: usize,
    /// Largest |joint - softmax(d)| over all probes and classes.
    pub identity_max_abs_diff: f64,
    pub identity_pass: bool,
    pub beam: usize,
    pub decoded: usize,
    /// Mean over steps of the fraction of running hypotheses sharing the top
    /// hypothesis's last emission frame.
    pub shared_frame_fraction: f64,
}

pub const IDENTITY_TOLERANCE: f64 = 1e-6;

/// (a) With a vocabulary-constant acoustic row, the joint posterior must equal
/// the decoder LM distribution. Probes draw random prefixes of `probe`
/// transcripts and random constants.
pub fn constant_acoustic_identity(model: &HaedModel, probe: &[Utterance], probes: usize, seed: u64) -> Result<f64> {
    let lm = model.lm().ok_or_else(|| Error::invalid("model has no decoder LM"))?;
    if probe.is_empty() {
        return Err(Error::invalid("empty probe set"));
    }
    let mut rng = rng_for(seed, &[0x1d]);
    let classes = model.vocab().output_classes;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let utt = &probe[rng.gen_range(0..probe.len())];
        let cut = rng.gen_range(0..=utt.tokens.len());
        let prefix = &utt.tokens[..cut];
        let d = lm.next_log_probs(&[prefix])?.remove(0);
        let constant = vec![rng.gen_range(-20.0..20.0); classes];
        let joint = joint_posterior(&constant, &d)?;
        let lm_p = softmax(&d);
        for (a, b) in joint.iter().zip(&lm_p) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

pub fn ilm_consistency_check(
    model: &HaedModel,
    probe: &[Utterance],
    probes: usize,
    beam: usize,
    decode_limit: usize,
    seed: u64,
) -> Result<IlmReport> {
    let worst = constant_acoustic_identity(model, probe, probes, seed)?;
    let decoder = Decoder::new(
        model,
        DecodeConfig {
            beam,
            ..DecodeConfig::default()
        },
    )?;
    let mut fractions = Vec::new();
    let mut decoded = 0;
    for utt in probe.iter().take(decode_limit) {
        let res = decoder.beam_search(&utt.features)?;
        fractions.extend(res.shared_frame_fraction);
        decoded += 1;
    }
    let shared = if fractions.is_empty() {
        1.0
    } else {
        fractions.iter().sum::<f64>() / fractions.len() as f64
    };
    Ok(IlmReport {
        probes,
        identity_max_abs_diff: worst,
        identity_pass: worst <= IDENTITY_TOLERANCE,
        beam,
        decoded,
        shared_frame_fraction: shared,
    })
}
