//! AdamW optimizer and the supervised training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::backprop::GradStore;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimState};
use crate::corpus::{FeatureSequence, Utterance};
use crate::error::{Error, IoContext, Result};
use crate::model::{HaedModel, LossTerms};
use crate::nn::{tensor_to_f64, ParamStore};
use crate::util::rng_for;

const STREAM_ORDER: u64 = 0x6f72_6465;
const STREAM_DROPOUT: u64 = 0x6472_6f70;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup, then cosine decay to `final_lr_ratio` at the last step.
    #[default]
    WarmupCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    pub final_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 200,
            schedule: Schedule::WarmupCosine,
            final_lr_ratio: 0.1,
            grad_clip: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer needs lr > 0 and betas in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("weight_decay, grad_clip must be >= 0 and eps > 0".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` of a run lasting `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::WarmupCosine => {
                if step < self.warmup_steps {
                    return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
                }
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                self.lr * (self.final_lr_ratio + (1.0 - self.final_lr_ratio) * cos)
            }
        }
    }
}

/// Decoupled-weight-decay Adam with 64-bit moments. Only parameters of the
/// given partitions are touched.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    state: OptimState,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: OptimState::default(),
        })
    }

    pub fn with_state(cfg: OptimizerConfig, state: OptimState) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, state })
    }

    pub fn state(&self) -> &OptimState {
        &self.state
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Apply one update; returns the gradient norm before clipping.
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        partitions: Option<&[&str]>,
        lr: f64,
    ) -> Result<f64> {
        let mut collected = BTreeMap::new();
        for (name, var) in store.iter() {
            if let Some(parts) = partitions {
                if !parts.contains(&ParamStore::partition_of(name)) {
                    continue;
                }
            }
            if let Some(g) = grads.get(var.as_tensor()) {
                collected.insert(name.clone(), tensor_to_f64(g)?);
            }
        }
        let norm = collected
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::invalid("non-finite gradient"));
        }
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, g) in collected {
            let var = store.var(&name).expect("collected from the store");
            let mut w = tensor_to_f64(var.as_tensor())?;
            let decay = var.rank() >= 2;
            let m = self.state.m.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            let v = self.state.v.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            for i in 0..w.len() {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.eps);
                if decay {
                    w[i] -= lr * self.cfg.weight_decay * w[i];
                }
                w[i] -= lr * update;
            }
            store.set(&name, &w)?;
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub log_every: u64,
    /// Run the dev evaluation hook every this many steps; 0 disables.
    pub eval_every: u64,
    /// Save a resumable checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            seed: 1,
            optimizer: OptimizerConfig::default(),
            log_every: 50,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub terms: LossTerms,
}

/// Batch index lists for 0-based `step`: each epoch is a fresh permutation
/// derived from `(seed, epoch)`, so any step can be reproduced in isolation.
pub fn batch_for_step(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size.max(1)).max(1) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[STREAM_ORDER, epoch]));
    let start = pos * batch_size;
    order[start..(start + batch_size).min(n)].to_vec()
}

pub type EvalHook<'a> = dyn FnMut(&HaedModel, u64) -> Result<serde_json::Value> + 'a;

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: HaedModel,
    pub optimizer: AdamW,
    /// Steps already taken.
    pub step: u64,
    metrics: Option<std::fs::File>,
    eval: Option<Box<EvalHook<'a>>>,
    checkpoint_dir: Option<std::path::PathBuf>,
    tokenizer: Option<crate::corpus::Tokenizer>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, model: HaedModel) -> Result<Self> {
        let optimizer = AdamW::new(cfg.optimizer.clone())?;
        Ok(Self {
            cfg,
            model,
            optimizer,
            step: 0,
            metrics: None,
            eval: None,
            checkpoint_dir: None,
            tokenizer: None,
        })
    }

    /// Continue from a checkpoint saved with optimizer state.
    pub fn resume(cfg: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        let state = ckpt
            .optim
            .ok_or_else(|| Error::invalid("checkpoint has no optimizer state to resume from"))?;
        let step = ckpt.meta.step;
        let optimizer = AdamW::with_state(cfg.optimizer.clone(), state)?;
        Ok(Self {
            cfg,
            model: ckpt.model,
            optimizer,
            step,
            metrics: None,
            eval: None,
            checkpoint_dir: None,
            tokenizer: ckpt.tokenizer,
        })
    }

    /// Append step records to a line-delimited log.
    pub fn log_to(mut self, path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .at(path)?;
        self.metrics = Some(f);
        Ok(self)
    }

    pub fn with_eval(mut self, hook: Box<EvalHook<'a>>) -> Self {
        self.eval = Some(hook);
        self
    }

    pub fn checkpoint_to(mut self, dir: &Path, tokenizer: Option<crate::corpus::Tokenizer>) -> Self {
        self.checkpoint_dir = Some(dir.to_path_buf());
        self.tokenizer = tokenizer.or(self.tokenizer);
        self
    }

    fn write_record(&mut self, value: &impl Serialize) -> Result<()> {
        if let Some(f) = &mut self.metrics {
            let mut line = serde_json::to_vec(value)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|source| Error::Io {
                path: "metrics".into(),
                source,
            })?;
        }
        Ok(())
    }

    /// Take one optimizer step on the batch chosen for the current step.
    pub fn train_step(&mut self, data: &[Utterance]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::invalid("no training utterances"));
        }
        let step = self.step;
        let idx = batch_for_step(data.len(), self.cfg.batch_size, self.cfg.seed, step);
        let feats: Vec<&FeatureSequence> = idx.iter().map(|&i| &data[i].features).collect();
        let labels: Vec<&[u32]> = idx.iter().map(|&i| data[i].tokens.as_slice()).collect();
        let mut rng = rng_for(self.cfg.seed, &[STREAM_DROPOUT, step]);
        let out = self.model.loss(&feats, &labels, Some(&mut rng))?;
        if !out.terms.total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss terms {:?}", out.terms),
            });
        }
        let lr = self.cfg.optimizer.lr_at(step, self.cfg.steps);
        let mut grad_norm = 0.0;
        if let Some(obj) = &out.objective {
            let grads = obj.backward()?;
            grad_norm = self
                .optimizer
                .step(self.model.store(), &grads, None, lr)
                .map_err(|e| Error::Divergence {
                    step,
                    detail: e.to_string(),
                })?;
        }
        if !out.terms.skipped.is_empty() {
            log::warn!("step {step}: skipped {:?} (labels do not fit the frames)", out.terms.skipped);
        }
        self.step += 1;
        Ok(StepRecord {
            step,
            lr,
            grad_norm,
            terms: out.terms,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.model.clone(), self.step, self.cfg.seed)?;
        ck.optim = Some(self.optimizer.state().clone());
        ck.tokenizer = self.tokenizer.clone();
        ck.meta.extra.insert("train".into(), serde_json::to_value(&self.cfg)?);
        Ok(ck)
    }

    /// Train until `cfg.steps` steps have been taken in total.
    pub fn run(&mut self, data: &[Utterance]) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.step < self.cfg.steps {
            let rec = self.train_step(data)?;
            let done = self.step;
            if self.cfg.log_every > 0 && (done % self.cfg.log_every == 0 || done == self.cfg.steps) {
                log::info!(
                    "step {done}: total {:.4} ce {:.4} lm {:.4} ctc {:.4} lr {:.2e}",
                    rec.terms.total,
                    rec.terms.ce,
                    rec.terms.lm,
                    rec.terms.ctc,
                    rec.lr
                );
            }
            self.write_record(&rec)?;
            records.push(rec);
            if self.cfg.eval_every > 0 && done % self.cfg.eval_every == 0 {
                if let Some(hook) = self.eval.as_mut() {
                    let dev = hook(&self.model, done)?;
                    log::info!("step {done}: dev {dev}");
                    self.write_record(&serde_json::json!({ "step": done, "dev": dev }))?;
                }
            }
            if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 {
                if let Some(dir) = &self.checkpoint_dir {
                    self.checkpoint()?.save(dir)?;
                }
            }
        }
        Ok(records)
    }
}

/// Moving average with window `w` over the `total` loss column.
pub fn moving_average(records: &[StepRecord], w: usize) -> Vec<f64> {
    let w = w.max(1);
    records
        .windows(w)
        .map(|win| win.iter().map(|r| r.terms.total).sum::<f64>() / w as f64)
        .collect()
}
