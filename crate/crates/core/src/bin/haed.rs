//! Command-line entry points. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use haed::adaptation::adapt_decoder;
use haed::checkpoint::Checkpoint;
use haed::config::RunConfig;
use haed::corpus::{build_dataset, DatasetLayout, Manifest, Tokenizer};
use haed::decoding::{decode_set, load_transcripts, save_transcripts, Decoder, FusionConfig, FusionLms};
use haed::ilm::ilm_consistency_check;
use haed::lm_decoder::LanguageModel;
use haed::metrics::evaluate;
use haed::model::{HaedModel, Variant};
use haed::ngram::NGramLm;
use haed::pipeline::{load_results, Pipeline};
use haed::report::write_report;
use haed::train::Trainer;
use haed::util::write_atomic;

#[derive(Parser)]
#[command(name = "haed", version, about = "Hybrid attention encoder-decoder recognizer")]
struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic corpus generation.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Train a model on the general-domain training split.
    Train(TrainArgs),
    /// Fine-tune the decoder LM of a checkpoint on text only.
    Adapt(AdaptArgs),
    /// External n-gram LMs.
    Lm {
        #[command(subcommand)]
        cmd: LmCmd,
    },
    /// Beam-search a manifest into a transcript file.
    Decode(DecodeArgs),
    /// Score transcripts against a manifest.
    Evaluate(EvaluateArgs),
    /// Internal-LM consistency checks.
    Ilm {
        #[command(subcommand)]
        cmd: IlmCmd,
    },
    /// Tables and plots from a finished run.
    Report(ReportArgs),
    /// Every stage end to end under the run directory.
    Pipeline(PipelineArgs),
}

#[derive(Subcommand)]
enum CorpusCmd {
    Build {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum LmCmd {
    TrainNgram {
        /// Manifest whose token sequences are the training text.
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        discount: Option<f64>,
        /// Defaults to tokenizer.json of the dataset holding the manifest.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum IlmCmd {
    Check {
        #[arg(long)]
        model: PathBuf,
        /// Probe utterances.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long)]
        beam: Option<usize>,
        /// Utterances beam-searched for the shared-frame statistic.
        #[arg(long, default_value_t = 20)]
        decode_limit: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Haed,
    NoDecoder,
    Aed,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Haed => Variant::Haed,
            VariantArg::NoDecoder => Variant::NoDecoder,
            VariantArg::Aed => Variant::Aed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root written by `corpus build`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint saved with optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    baseline: PathBuf,
    /// Manifest of target-domain text.
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    None,
    Shallow,
    DensityRatio,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// Keep every frame for cross-attention.
    #[arg(long)]
    no_prune: bool,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long)]
    target_lm: Option<PathBuf>,
    #[arg(long)]
    source_lm: Option<PathBuf>,
    #[arg(long)]
    lm_weight: Option<f64>,
    #[arg(long)]
    source_weight: Option<f64>,
    /// Score with this n-gram in place of the decoder LM.
    #[arg(long)]
    swap_lm: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    transcripts: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Adds decoder-LM perplexity on the references.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A pipeline run directory holding results.json.
    #[arg(long)]
    run: PathBuf,
    /// Defaults to <run>/report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Defaults to the fingerprint-named run directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

fn run_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// `<dataset>/<domain>/<split>.jsonl` sits two levels below tokenizer.json.
fn dataset_tokenizer(manifest: &Path) -> anyhow::Result<Tokenizer> {
    let guess = manifest
        .parent()
        .and_then(Path::parent)
        .map(|d| d.join("tokenizer.json"))
        .ok_or_else(|| anyhow!("cannot locate a tokenizer for {}", manifest.display()))?;
    Tokenizer::load(&guess).with_context(|| "pass --tokenizer explicitly".to_string())
}

fn checkpoint_tokenizer(ck: &Checkpoint, manifest: &Path) -> anyhow::Result<Tokenizer> {
    match &ck.tokenizer {
        Some(t) => Ok(t.clone()),
        None => dataset_tokenizer(manifest),
    }
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    match path {
        Some(p) => write_atomic(p, &bytes)?,
        None => print!("{}", String::from_utf8(bytes)?),
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = run_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Corpus {
            cmd: CorpusCmd::Build { out, seed },
        } => {
            let layout = build_dataset(&cfg.corpus, &out, seed.unwrap_or(cfg.seed))?;
            println!("{}", serde_json::to_string(&layout.counts)?);
        }
        Cmd::Train(a) => {
            if let Some(v) = a.variant {
                cfg.model.variant = v.into();
            }
            if let Some(l) = a.lambda {
                cfg.model.lambda = l;
            }
            if let Some(s) = a.steps {
                cfg.train.steps = s;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let layout = DatasetLayout::load(&a.data)?;
            let tok = layout.tokenizer()?;
            let train = layout.manifest(&layout.general, "train")?.load_utterances()?;
            let trainer = match &a.resume {
                Some(p) => Trainer::resume(cfg.train.clone(), Checkpoint::load(p)?)?,
                None => Trainer::new(
                    cfg.train.clone(),
                    HaedModel::for_tokenizer(&cfg.model, &tok, cfg.seed)?,
                )?,
            };
            let mut trainer = trainer
                .log_to(&a.out.join("metrics.jsonl"))?
                .checkpoint_to(&a.out, Some(tok));
            trainer.run(&train)?;
            let mut ck = trainer.checkpoint()?;
            ck.meta.extra.insert("config_fingerprint".into(), cfg.fingerprint().into());
            ck.save(&a.out)?;
            println!("trained {} steps -> {}", trainer.step, a.out.display());
        }
        Cmd::Adapt(a) => {
            let mut acfg = cfg.adapt.clone();
            if let Some(x) = a.alpha {
                acfg.alpha = x;
            }
            if let Some(x) = a.lr {
                acfg.lr = x;
            }
            if let Some(x) = a.sweeps {
                acfg.sweeps = x;
            }
            let base = Checkpoint::load(&a.baseline)?;
            let texts = Manifest::load(&a.text)?.token_sequences();
            let out = adapt_decoder(&base, &texts, &acfg)?;
            out.checkpoint.save(&a.out)?;
            write_atomic(
                &a.out.join("adapt.jsonl"),
                &out.log
                    .iter()
                    .map(|s| serde_json::to_string(s).map(|l| l + "\n"))
                    .collect::<Result<String, _>>()?
                    .into_bytes(),
            )?;
            println!("adapted {} steps -> {}", out.log.len(), a.out.display());
        }
        Cmd::Lm {
            cmd:
                LmCmd::TrainNgram {
                    text,
                    out,
                    order,
                    discount,
                    tokenizer,
                },
        } => {
            let tok = match tokenizer {
                Some(p) => Tokenizer::load(&p)?,
                None => dataset_tokenizer(&text)?,
            };
            let texts = Manifest::load(&text)?.token_sequences();
            let lm = NGramLm::train(
                &texts,
                order.unwrap_or(cfg.ngram.order),
                tok.num_output_classes(),
                tok.eos(),
                tok.sos(),
                discount.unwrap_or(cfg.ngram.discount),
            )?;
            lm.save(&out)?;
            println!("{}-gram with {} histories -> {}", lm.order(), lm.histories().count(), out.display());
        }
        Cmd::Decode(a) => {
            let mut dcfg = cfg.decode.clone();
            if let Some(b) = a.beam {
                dcfg.beam = b;
            }
            if a.beta.is_some() {
                dcfg.beta = a.beta;
            }
            if a.no_prune {
                dcfg.prune_threshold = None;
            }
            let wt = a.lm_weight.unwrap_or(dcfg.fusion.target_weight);
            let ws = a.source_weight.unwrap_or(dcfg.fusion.source_weight);
            match a.fusion {
                Some(FusionArg::None) => dcfg.fusion = FusionConfig::default(),
                Some(FusionArg::Shallow) => dcfg.fusion = FusionConfig::shallow(wt),
                Some(FusionArg::DensityRatio) => dcfg.fusion = FusionConfig::density_ratio(wt, ws),
                None => {
                    dcfg.fusion.target_weight = wt;
                    dcfg.fusion.source_weight = ws;
                }
            }
            let ck = Checkpoint::load(&a.model)?;
            let tok = checkpoint_tokenizer(&ck, &a.manifest)?;
            let manifest = Manifest::load(&a.manifest)?;
            let load = |p: &Option<PathBuf>| p.as_deref().map(NGramLm::load).transpose();
            let (target, source, swap) = (load(&a.target_lm)?, load(&a.source_lm)?, load(&a.swap_lm)?);
            let lms = FusionLms {
                target: target.as_ref().map(|l| l as &dyn LanguageModel),
                source: source.as_ref().map(|l| l as &dyn LanguageModel),
            };
            let mut decoder = Decoder::new(&ck.model, dcfg)?.with_lms(lms)?;
            if let Some(s) = &swap {
                decoder = decoder.with_lm_override(s)?;
            }
            let transcripts = decode_set(&decoder, &manifest, &tok)?;
            save_transcripts(&a.out, &transcripts)?;
            let flagged = transcripts.iter().filter(|t| t.flagged).count();
            println!("decoded {} utterances ({flagged} flagged) -> {}", transcripts.len(), a.out.display());
        }
        Cmd::Evaluate(a) => {
            let ck = a.model.as_deref().map(Checkpoint::load).transpose()?;
            let tok = match (&a.tokenizer, &ck) {
                (Some(p), _) => Tokenizer::load(p)?,
                (None, Some(ck)) => checkpoint_tokenizer(ck, &a.manifest)?,
                (None, None) => dataset_tokenizer(&a.manifest)?,
            };
            let manifest = Manifest::load(&a.manifest)?;
            let transcripts = load_transcripts(&a.transcripts)?;
            let mut report = evaluate(&transcripts, &manifest, &tok, &cfg.fingerprint())?;
            if let Some(lm) = ck.as_ref().and_then(|c| c.model.lm()) {
                report.perplexity = Some(lm.perplexity(&manifest.token_sequences(), 32)?);
            }
            write_json(a.out.as_deref(), &report)?;
        }
        Cmd::Ilm {
            cmd:
                IlmCmd::Check {
                    model,
                    manifest,
                    probes,
                    beam,
                    decode_limit,
                    out,
                },
        } => {
            let ck = Checkpoint::load(&model)?;
            let probe = Manifest::load(&manifest)?.load_utterances()?;
            let report = ilm_consistency_check(
                &ck.model,
                &probe,
                probes,
                beam.unwrap_or(cfg.decode.beam),
                decode_limit,
                cfg.seed,
            )?;
            write_json(out.as_deref(), &report)?;
            if !report.identity_pass {
                bail!("constant-acoustics identity violated: {:.3e}", report.identity_max_abs_diff);
            }
        }
        Cmd::Report(a) => {
            let results = load_results(&a.run.join("results.json"))?;
            let out = a.out.unwrap_or_else(|| a.run.join("report"));
            write_report(&results, &out)?;
            println!("report -> {}", out.display());
        }
        Cmd::Pipeline(a) => {
            let dir = a.run_dir.unwrap_or_else(|| cfg.run_dir());
            let results = Pipeline::new(cfg, &dir)?.run()?;
            println!("{}", serde_json::to_string(&results.adaptation)?);
            println!("results -> {}", dir.join("results.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // a malformed config file is a usage error, like a bad flag
            match e.downcast_ref::<haed::Error>() {
                Some(haed::Error::Config(_)) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
