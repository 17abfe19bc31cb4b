//! The end-to-end experiment: corpus, model training, n-gram LMs, decoder
//! adaptation, decoding and scoring, laid out under one run directory.
//!
//! ```text
//! <run>/config.toml
//! <run>/data/                     corpus (dataset.json, manifests, features)
//! <run>/models/<name>/            checkpoints, with metrics.jsonl beside them
//! <run>/lms/<domain>.ngram
//! <run>/decode/<label>.jsonl      transcripts
//! <run>/eval/<label>.json         scores
//! <run>/results.json
//! <run>/report/                   tables and plots
//! ```
//!
//! Every stage reuses an artifact that already exists, so an interrupted run
//! can be continued with the same command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::adaptation::{adapt_decoder, AdaptConfig};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{build_dataset, DatasetLayout, Manifest, Tokenizer, TEXT_SPLIT};
use crate::decoding::{decode_set, save_transcripts, DecodeConfig, Decoder, FusionConfig, FusionLms, FusionMode};
use crate::error::{Error, IoContext, Result};
use crate::ilm::{ilm_consistency_check, IlmReport};
use crate::lm_decoder::LanguageModel;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{HaedModel, ModelConfig, Variant};
use crate::ngram::NGramLm;
use crate::report::{write_report, AdaptRow, LambdaRow, PplRow, Results, SystemRow};
use crate::train::Trainer;
use crate::util::write_atomic;

pub struct Pipeline {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    fingerprint: String,
}

/// Checkpoint directory name for a trained variant.
pub fn model_name(variant: Variant, lambda: f64, default_lambda: f64) -> String {
    match variant {
        Variant::Haed if lambda == default_lambda => "haed".into(),
        Variant::Haed => format!("haed_lambda{lambda}"),
        Variant::NoDecoder => "no_decoder".into(),
        Variant::Aed => "aed".into(),
    }
}

fn truncate(mut m: Manifest, limit: usize) -> Manifest {
    if limit > 0 && m.records.len() > limit {
        m.records.truncate(limit);
    }
    m
}

impl Pipeline {
    pub fn new(cfg: RunConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let dir = dir.into();
        std::fs::create_dir_all(&dir).at(&dir)?;
        let fingerprint = cfg.fingerprint();
        write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
        Ok(Self { cfg, dir, fingerprint })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dir.join("data")
    }

    pub fn model_dir(&self, name: &str) -> PathBuf {
        self.dir.join("models").join(name)
    }

    pub fn dataset(&self) -> Result<DatasetLayout> {
        let root = self.data_dir();
        if root.join("dataset.json").exists() {
            return DatasetLayout::load(&root);
        }
        let t = Instant::now();
        let layout = build_dataset(&self.cfg.corpus, &root, self.cfg.seed)?;
        log::info!("corpus built in {:.1}s", t.elapsed().as_secs_f64());
        Ok(layout)
    }

    fn test_manifest(&self, layout: &DatasetLayout, domain: &str) -> Result<Manifest> {
        Ok(truncate(
            layout.manifest(domain, "test")?,
            self.cfg.experiment.max_test_utterances,
        ))
    }

    /// Train a variant or load it if its checkpoint exists.
    pub fn train(&self, layout: &DatasetLayout, model_cfg: &ModelConfig) -> Result<Checkpoint> {
        let name = model_name(model_cfg.variant, model_cfg.lambda, self.cfg.model.lambda);
        let dir = self.model_dir(&name);
        if dir.join("metadata.json").exists() {
            return Checkpoint::load(&dir);
        }
        let tok = layout.tokenizer()?;
        let train = layout.manifest(&layout.general, "train")?.load_utterances()?;
        let model = HaedModel::for_tokenizer(model_cfg, &tok, self.cfg.seed)?;
        let metrics = self.dir.join("models").join(format!("{name}.metrics.jsonl"));
        if metrics.exists() {
            std::fs::remove_file(&metrics).at(&metrics)?;
        }
        let mut trainer = Trainer::new(self.cfg.train.clone(), model)?
            .log_to(&metrics)?
            .checkpoint_to(&dir, Some(tok));
        let t = Instant::now();
        trainer.run(&train)?;
        log::info!("{name}: {} steps in {:.1}s", trainer.step, t.elapsed().as_secs_f64());
        let mut ck = trainer.checkpoint()?;
        ck.optim = None;
        ck.meta.extra.insert("config_fingerprint".into(), self.fingerprint.clone().into());
        ck.save(&dir)?;
        Ok(ck)
    }

    /// Target LM from a domain's text split; the source LM from general train transcripts.
    pub fn ngram(&self, layout: &DatasetLayout, domain: &str) -> Result<NGramLm> {
        let path = self.dir.join("lms").join(format!("{domain}.ngram"));
        if path.exists() {
            return NGramLm::load(&path);
        }
        let tok = layout.tokenizer()?;
        let split = if domain == layout.general { "train" } else { TEXT_SPLIT };
        let texts = layout.manifest(domain, split)?.token_sequences();
        let lm = NGramLm::train(
            &texts,
            self.cfg.ngram.order,
            tok.num_output_classes(),
            tok.eos(),
            tok.sos(),
            self.cfg.ngram.discount,
        )?;
        lm.save(&path)?;
        Ok(lm)
    }

    pub fn adapt(
        &self,
        layout: &DatasetLayout,
        base_name: &str,
        base: &Checkpoint,
        domain: &str,
        cfg: &AdaptConfig,
    ) -> Result<Checkpoint> {
        let dir = self.model_dir(&format!("{base_name}_adapt_{domain}_alpha{}", cfg.alpha));
        if dir.join("metadata.json").exists() {
            return Checkpoint::load(&dir);
        }
        let texts = layout.manifest(domain, TEXT_SPLIT)?.token_sequences();
        let t = Instant::now();
        let out = adapt_decoder(base, &texts, cfg)?;
        log::info!(
            "adapted {base_name} to {domain} (alpha {}) in {} steps, {:.1}s",
            cfg.alpha,
            out.log.len(),
            t.elapsed().as_secs_f64()
        );
        out.checkpoint.save(&dir)?;
        Ok(out.checkpoint)
    }

    /// Decode a manifest and score it, reusing stored scores.
    pub fn decode_eval(
        &self,
        label: &str,
        model: &HaedModel,
        manifest: &Manifest,
        tok: &Tokenizer,
        decode: DecodeConfig,
        lms: FusionLms<'_>,
    ) -> Result<EvalReport> {
        let eval_path = self.dir.join("eval").join(format!("{label}.json"));
        if eval_path.exists() {
            let bytes = std::fs::read(&eval_path).at(&eval_path)?;
            return serde_json::from_slice(&bytes).map_err(|e| Error::format(&eval_path, e.to_string()));
        }
        let decoder = Decoder::new(model, decode)?.with_lms(lms)?;
        let t = Instant::now();
        let transcripts = decode_set(&decoder, manifest, tok)?;
        save_transcripts(&self.dir.join("decode").join(format!("{label}.jsonl")), &transcripts)?;
        let report = evaluate(&transcripts, manifest, tok, &self.fingerprint)?;
        log::info!(
            "{label}: WER {:.4} TER {:.4} ({} utts, {:.1}s)",
            report.overall.wer,
            report.overall.ter,
            report.overall.utterances,
            t.elapsed().as_secs_f64()
        );
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        write_atomic(&eval_path, &json)?;
        Ok(report)
    }

    fn fusion(&self, mode: FusionMode) -> DecodeConfig {
        let base = &self.cfg.decode.fusion;
        let fusion = match mode {
            FusionMode::None => FusionConfig::default(),
            FusionMode::Shallow => FusionConfig::shallow(base.target_weight),
            FusionMode::DensityRatio => FusionConfig::density_ratio(base.target_weight, base.source_weight),
        };
        DecodeConfig {
            fusion,
            ..self.cfg.decode.clone()
        }
    }

    fn dev_ppl(&self, layout: &DatasetLayout, domain: &str, ck: &Checkpoint) -> Result<Option<f64>> {
        let Some(lm) = ck.model.lm() else { return Ok(None) };
        let dev = truncate(layout.manifest(domain, "dev")?, self.cfg.experiment.max_ppl_utterances);
        Ok(Some(lm.perplexity(&dev.token_sequences(), 32)?))
    }

    /// Every stage, then `results.json` and the report directory.
    pub fn run(&self) -> Result<Results> {
        let layout = self.dataset()?;
        let tok = layout.tokenizer()?;
        let general = layout.general.clone();
        let domains = layout.adaptation_domains();
        let exp = &self.cfg.experiment;
        let lambda = self.cfg.model.lambda;

        let haed_cfg = ModelConfig {
            variant: Variant::Haed,
            ..self.cfg.model.clone()
        };
        let haed = self.train(&layout, &haed_cfg)?;
        let general_test = self.test_manifest(&layout, &general)?;

        let mut results = Results {
            config_fingerprint: self.fingerprint.clone(),
            general: general.clone(),
            domains: domains.clone(),
            ..Results::default()
        };

        // lambda sweep on the general domain
        let mut lambdas = exp.lambda_sweep.clone();
        if !lambdas.contains(&lambda) {
            lambdas.push(lambda);
        }
        lambdas.sort_by(f64::total_cmp);
        for &l in &lambdas {
            let ck = if l == lambda {
                haed.clone()
            } else {
                self.train(&layout, &ModelConfig { lambda: l, ..haed_cfg.clone() })?
            };
            let name = model_name(Variant::Haed, l, lambda);
            let ev = self.decode_eval(
                &format!("{name}.{general}"),
                &ck.model,
                &general_test,
                &tok,
                self.fusion(FusionMode::None),
                FusionLms::default(),
            )?;
            results.lambda_sweep.push(LambdaRow {
                lambda: l,
                dev_ppl: self.dev_ppl(&layout, &general, &ck)?.unwrap_or(f64::NAN),
                test_wer: ev.overall.wer,
                test_ter: ev.overall.ter,
            });
        }
        let haed_general = results
            .lambda_sweep
            .iter()
            .find(|r| r.lambda == lambda)
            .cloned()
            .expect("model lambda is in the sweep");
        results.systems.push(SystemRow {
            system: "HAED".into(),
            wer: haed_general.test_wer,
            ter: haed_general.test_ter,
        });

        let mut extra_variants = Vec::new();
        if exp.no_decoder_ablation {
            extra_variants.push(Variant::NoDecoder);
        }
        if exp.aed_baseline {
            extra_variants.push(Variant::Aed);
        }
        let mut aed: Option<Checkpoint> = None;
        for v in extra_variants {
            let ck = self.train(&layout, &ModelConfig { variant: v, ..self.cfg.model.clone() })?;
            let name = model_name(v, lambda, lambda);
            let ev = self.decode_eval(
                &format!("{name}.{general}"),
                &ck.model,
                &general_test,
                &tok,
                self.fusion(FusionMode::None),
                FusionLms::default(),
            )?;
            results.systems.push(SystemRow {
                system: match v {
                    Variant::NoDecoder => "HAED w/o decoder LM".into(),
                    _ => "AED".into(),
                },
                wer: ev.overall.wer,
                ter: ev.overall.ter,
            });
            if v == Variant::Aed {
                aed = Some(ck);
            }
        }

        // adaptation domains
        let source_lm = self.ngram(&layout, &general)?;
        let general_ppl = self.dev_ppl(&layout, &general, &haed)?.unwrap_or(f64::NAN);
        let mut rows: BTreeMap<&str, AdaptRow> = BTreeMap::new();
        let mut row = |system: &'static str, domain: &str, wer: f64| {
            rows.entry(system)
                .or_insert_with(|| AdaptRow {
                    system: system.into(),
                    ..AdaptRow::default()
                })
                .wer
                .insert(domain.to_string(), wer);
        };
        let alpha_cfg = self.cfg.adapt.clone();
        let no_kl = AdaptConfig {
            alpha: 0.0,
            ..alpha_cfg.clone()
        };
        for d in &domains {
            let target_lm = self.ngram(&layout, d)?;
            let test = self.test_manifest(&layout, d)?;
            let both = FusionLms {
                target: Some(&target_lm as &dyn LanguageModel),
                source: Some(&source_lm as &dyn LanguageModel),
            };
            let eval = |label: &str, m: &HaedModel, mode: FusionMode| {
                self.decode_eval(&format!("{label}.{d}"), m, &test, &tok, self.fusion(mode), both)
            };

            row("HAED", d, eval("haed", &haed.model, FusionMode::None)?.overall.wer);
            row("HAED+SF", d, eval("haed_sf", &haed.model, FusionMode::Shallow)?.overall.wer);
            row("HAED+DR", d, eval("haed_dr", &haed.model, FusionMode::DensityRatio)?.overall.wer);

            let adapted = self.adapt(&layout, "haed", &haed, d, &alpha_cfg)?;
            let adapted_wer = eval("haed_adapt", &adapted.model, FusionMode::None)?.overall.wer;
            row("+Adapt", d, adapted_wer);
            row("++SF", d, eval("haed_adapt_sf", &adapted.model, FusionMode::Shallow)?.overall.wer);
            let general_after = self.decode_eval(
                &format!("haed_adapt_{d}.{general}"),
                &adapted.model,
                &general_test,
                &tok,
                self.fusion(FusionMode::None),
                FusionLms::default(),
            )?;

            let unregularized = self.adapt(&layout, "haed", &haed, d, &no_kl)?;
            results.adaptation_ppl.push(PplRow {
                domain: d.clone(),
                baseline_general_ppl: general_ppl,
                alpha: alpha_cfg.alpha,
                adapted_general_ppl: self.dev_ppl(&layout, &general, &adapted)?.unwrap_or(f64::NAN),
                unregularized_general_ppl: self.dev_ppl(&layout, &general, &unregularized)?.unwrap_or(f64::NAN),
                baseline_target_ppl: self.dev_ppl(&layout, d, &haed)?.unwrap_or(f64::NAN),
                adapted_target_ppl: self.dev_ppl(&layout, d, &adapted)?.unwrap_or(f64::NAN),
                general_wer_before: haed_general.test_wer,
                general_wer_after: general_after.overall.wer,
            });

            if let Some(aed) = &aed {
                row("AED", d, eval("aed", &aed.model, FusionMode::None)?.overall.wer);
                row("AED+SF", d, eval("aed_sf", &aed.model, FusionMode::Shallow)?.overall.wer);
                row("AED+DR", d, eval("aed_dr", &aed.model, FusionMode::DensityRatio)?.overall.wer);
            }
        }
        let order = ["HAED", "+Adapt", "++SF", "AED", "AED+SF", "AED+DR", "HAED+SF", "HAED+DR"];
        results.adaptation = order.iter().filter_map(|s| rows.remove(s)).collect();

        let probe = truncate(layout.manifest(&general, "dev")?, 20).load_utterances()?;
        let ilm: IlmReport = ilm_consistency_check(&haed.model, &probe, 100, self.cfg.decode.beam, 20, self.cfg.seed)?;
        results.ilm = Some(ilm);

        let mut json = serde_json::to_vec_pretty(&results)?;
        json.push(b'\n');
        write_atomic(&self.dir.join("results.json"), &json)?;
        write_report(&results, &self.dir.join("report"))?;
        Ok(results)
    }
}

pub fn load_results(path: &Path) -> Result<Results> {
    let bytes = std::fs::read(path).at(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
