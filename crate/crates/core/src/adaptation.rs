//! Text-only adaptation of the decoder LM with a KL penalty toward the
//! baseline decoder. Only the `lm` partition is updated.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lm_decoder::LmDecoder;
use crate::model::HaedModel;
use crate::nn::{tensor_from_f64, ParamStore};
use crate::train::{AdamW, OptimizerConfig, Schedule};
use crate::util::rng_for;

/// Floor applied to baseline probabilities inside the KL log ratio.
pub const KL_EPS: f64 = 1e-10;
const STREAM_ADAPT: u64 = 0x6164_6170;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// KL weight.
    pub alpha: f64,
    pub lr: f64,
    pub sweeps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lr: 1e-4,
            sweeps: 1,
            batch_size: 16,
            seed: 1,
        }
    }
}

impl AdaptConfig {
    /// Partitions kept fixed; the LM is the only trainable part.
    pub const FROZEN: [&'static str; 3] = ["encoder", "ctc", "acoustic"];

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("adaptation needs lr > 0 and batch_size >= 1".into()));
        }
        Ok(())
    }
}

/// `Σ_u KL(adapted_u ‖ baseline_u)` over probability rows.
pub fn kl_term(adapted: &[Vec<f64>], baseline: &[Vec<f64>]) -> Result<f64> {
    if adapted.len() != baseline.len() {
        return Err(Error::invalid("KL needs the same number of steps on both sides"));
    }
    let mut total = 0.0;
    for (p, q) in adapted.iter().zip(baseline) {
        if p.len() != q.len() {
            return Err(Error::invalid("KL rows differ in length"));
        }
        for (&pi, &qi) in p.iter().zip(q) {
            if pi > 0.0 && pi != qi {
                total += pi * (pi.ln() - qi.max(KL_EPS).ln());
            }
        }
    }
    Ok(total.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptStep {
    pub step: u64,
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<AdaptStep>,
}

fn batch_inputs(lm: &LmDecoder, batch: &[&Vec<u32>]) -> (Vec<Vec<u32>>, usize) {
    let sos = lm.vocab().sos;
    let inputs: Vec<Vec<u32>> = batch
        .iter()
        .map(|t| std::iter::once(sos).chain(t.iter().copied()).collect())
        .collect();
    let steps = inputs.iter().map(Vec::len).max().unwrap_or(1);
    (inputs, steps)
}

/// Per-step validity and target masks, `B × L × 1` and `B × L × V`.
fn masks(lm: &LmDecoder, batch: &[&Vec<u32>], steps: usize, store: &ParamStore) -> Result<(Tensor, Tensor)> {
    let v = lm.vocab().output_classes;
    let eos = lm.vocab().eos;
    let b = batch.len();
    let mut valid = vec![0.0; b * steps];
    let mut target = vec![0.0; b * steps * v];
    for (i, t) in batch.iter().enumerate() {
        for (u, &y) in t.iter().chain(std::iter::once(&eos)).enumerate() {
            valid[i * steps + u] = 1.0;
            target[(i * steps + u) * v + y as usize] = 1.0;
        }
    }
    Ok((
        tensor_from_f64(valid, &[b, steps, 1], store.precision())?,
        tensor_from_f64(target, &[b, steps, v], store.precision())?,
    ))
}

/// Per-utterance-averaged `(nll, kl)` tensors of a batch.
fn batch_objective(
    adapted: &LmDecoder,
    baseline: &LmDecoder,
    batch: &[&Vec<u32>],
    store: &ParamStore,
) -> Result<(Tensor, Tensor)> {
    let (inputs, steps) = batch_inputs(adapted, batch);
    let (valid, target) = masks(adapted, batch, steps, store)?;
    let n = batch.len() as f64;
    let lp_a = adapted.forward(&inputs, None)?.log_probs;
    let lp_b = baseline.forward(&inputs, None)?.log_probs.detach();
    let nll = ((&lp_a * &target)?.sum_all()?.neg()? / n)?;
    let floor = KL_EPS.ln();
    let lp_b = lp_b.maximum(floor)?;
    let kl_rows = (lp_a.exp()? * (&lp_a - lp_b)?)?.sum_keepdim(candle_core::D::Minus1)?;
    let kl = ((kl_rows * valid)?.sum_all()? / n)?;
    Ok((nll, kl))
}

/// Mean per-utterance KL(adapted ‖ baseline) over a text set.
pub fn mean_kl(adapted: &LmDecoder, baseline: &LmDecoder, texts: &[Vec<u32>], batch_size: usize) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::invalid("empty text set"));
    }
    let mut total = 0.0;
    for chunk in texts.chunks(batch_size.max(1)) {
        let batch: Vec<&Vec<u32>> = chunk.iter().collect();
        let (inputs, _) = batch_inputs(adapted, &batch);
        let rows = |lm: &LmDecoder| -> Result<Vec<Vec<Vec<f64>>>> {
            Ok(lm.forward(&inputs, None)?.log_probs.to_dtype(DType::F64)?.to_vec3::<f64>()?)
        };
        let (a, b) = (rows(adapted)?, rows(baseline)?);
        for (i, t) in chunk.iter().enumerate() {
            let steps = t.len() + 1;
            let pa: Vec<Vec<f64>> = a[i][..steps].iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
            let pb: Vec<Vec<f64>> = b[i][..steps].iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
            total += kl_term(&pa, &pb)?;
        }
    }
    Ok(total / texts.len() as f64)
}

/// Fine-tune the decoder LM of `baseline` on `texts`.
pub fn adapt_decoder(baseline: &Checkpoint, texts: &[Vec<u32>], cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if texts.is_empty() || texts.iter().all(Vec::is_empty) {
        return Err(Error::invalid("adaptation text is empty"));
    }
    let frozen = baseline
        .model
        .lm()
        .ok_or_else(|| Error::invalid("baseline has no decoder LM to adapt"))?
        .clone();
    let model_cfg = baseline.model.config().clone();
    let vocab = *baseline.model.vocab();
    // fresh storage so the baseline's variables are never written
    let store = {
        let specs = HaedModel::param_specs(&model_cfg, &vocab);
        let tensors = baseline
            .model
            .store()
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect::<Result<_>>()?;
        ParamStore::from_tensors(&specs, tensors, model_cfg.precision)?
    };
    let model = HaedModel::from_store(&model_cfg, vocab, store)?;
    let lm = model.lm().expect("same variant as baseline").clone();
    let baseline_lm = frozen;

    let opt_cfg = OptimizerConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        warmup_steps: 0,
        schedule: Schedule::Constant,
        ..OptimizerConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg)?;
    let mut log = Vec::new();
    let mut step = 0u64;
    for sweep in 0..cfg.sweeps {
        let mut order: Vec<usize> = (0..texts.len()).filter(|&i| !texts[i].is_empty()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[STREAM_ADAPT, sweep as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Vec<u32>> = chunk.iter().map(|&i| &texts[i]).collect();
            let (nll, kl) = batch_objective(&lm, &baseline_lm, &batch, model.store())?;
            let objective = if cfg.alpha != 0.0 {
                (&nll + (&kl * cfg.alpha)?)?
            } else {
                nll.clone()
            };
            let nll_v = nll.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let kl_v = kl.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let total = nll_v + cfg.alpha * kl_v;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("adaptation loss nll {nll_v} kl {kl_v}"),
                });
            }
            let grads = objective.backward()?;
            opt.step(model.store(), &grads, Some(&["lm"]), cfg.lr)?;
            log.push(AdaptStep {
                step,
                nll: nll_v,
                kl: kl_v,
                total,
            });
            step += 1;
        }
    }

    let mut checkpoint = Checkpoint::new(model, baseline.meta.step, baseline.meta.seed)?;
    checkpoint.tokenizer = baseline.tokenizer.clone();
    checkpoint.meta.extra = baseline.meta.extra.clone();
    checkpoint.meta.extra.remove("optim_step");
    checkpoint.meta.extra.insert("adapt".into(), serde_json::to_value(cfg)?);
    checkpoint.meta.extra.insert("adapt_steps".into(), step.into());
    Ok(AdaptOutcome { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_forms() {
        let p = vec![vec![0.2, 0.3, 0.5]];
        assert_eq!(kl_term(&p, &p).unwrap(), 0.0);
        let one_hot = vec![vec![1.0, 0.0, 0.0, 0.0]];
        let uniform = vec![vec![0.25; 4]];
        assert!((kl_term(&one_hot, &uniform).unwrap() - 4f64.ln()).abs() < 1e-12);
        let zero_base = vec![vec![0.0, 1.0]];
        let kl = kl_term(&vec![vec![0.5, 0.5]], &zero_base).unwrap();
        assert!((kl - (0.5 * (0.5f64.ln() - KL_EPS.ln()) + 0.5 * 0.5f64.ln())).abs() < 1e-9);
    }
}
