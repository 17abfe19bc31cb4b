use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::domain::{sample_text, ChainShape, DomainSpec};
use super::manifest::{Manifest, ManifestRecord};
use super::render::{render_features, utterance_seed, write_features, FeatureSequence, RenderSpec};
use super::tokenizer::Tokenizer;
use crate::error::{Error, IoContext, Result};
use crate::util::{derive_seed, str_hash, write_atomic};

pub const AUDIO_SPLITS: [&str; 3] = ["train", "dev", "test"];
pub const TEXT_SPLIT: &str = "text";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainConfig {
    pub name: String,
    pub mean_length: usize,
    /// Seed for the domain's chain; defaults to one derived from the dataset seed.
    pub chain_seed: Option<u64>,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Text-only utterances (adaptation data).
    pub text: usize,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            mean_length: 10,
            chain_seed: None,
            train: 0,
            dev: 0,
            test: 0,
            text: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Text symbol inventory, one character per symbol.
    pub symbols: String,
    /// Name of the source (training) domain; all others are adaptation domains.
    pub general: String,
    pub chain: ChainShape,
    /// Weight of an adaptation domain's own chain; the rest of each row
    /// comes from the general chain. 1.0 gives unrelated domains.
    pub domain_shift: f64,
    pub render: RenderSpec,
    pub domains: Vec<DomainConfig>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            symbols: " abcdefghijklmnopqrstuvwxyz'.,".to_string(),
            general: "general".to_string(),
            chain: ChainShape::default(),
            domain_shift: 0.3,
            render: RenderSpec {
                pair_spread: 1.0,
                ..RenderSpec::default()
            },
            domains: vec![
                DomainConfig {
                    name: "general".into(),
                    train: 2400,
                    dev: 300,
                    test: 500,
                    ..DomainConfig::default()
                },
                DomainConfig {
                    name: "conversation".into(),
                    dev: 300,
                    test: 500,
                    text: 3000,
                    ..DomainConfig::default()
                },
                DomainConfig {
                    name: "broadcast".into(),
                    dev: 300,
                    test: 500,
                    text: 3000,
                    ..DomainConfig::default()
                },
            ],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Config("corpus needs a general domain and at least one adaptation domain".into()));
        }
        let mut seen = BTreeSet::new();
        for d in &self.domains {
            if d.name.is_empty()
                || !d.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::Config(format!("domain name {:?} is not a plain identifier", d.name)));
            }
            if !seen.insert(d.name.as_str()) {
                return Err(Error::Config(format!(
                    "domain {:?} appears twice; its output paths would overlap",
                    d.name
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.domain_shift) {
            return Err(Error::Config(format!("domain_shift {} is outside [0, 1]", self.domain_shift)));
        }
        if !seen.contains(self.general.as_str()) {
            return Err(Error::Config(format!("general domain {:?} is not listed", self.general)));
        }
        self.render.validate()
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::build(&[self.symbols.as_str()])
    }

    pub fn domain_specs(&self, seed: u64) -> Result<Vec<DomainSpec>> {
        let n = self.symbols.chars().count();
        let own: Vec<DomainSpec> = self
            .domains
            .iter()
            .map(|d| {
                let chain_seed = d.chain_seed.unwrap_or_else(|| derive_seed(seed, &[0xC4]));
                DomainSpec::generate(&d.name, n, self.chain, d.mean_length, chain_seed)
            })
            .collect::<Result<_>>()?;
        let general = own
            .iter()
            .find(|s| s.name == self.general)
            .ok_or_else(|| Error::Config(format!("general domain {:?} is not listed", self.general)))?
            .clone();
        Ok(own
            .into_iter()
            .map(|s| if s.name == self.general { s } else { general.mix(&s, self.domain_shift) })
            .collect())
    }

    pub fn adaptation_domains(&self) -> impl Iterator<Item = &DomainConfig> {
        self.domains.iter().filter(move |d| d.name != self.general)
    }
}

/// What `build_dataset` wrote, also persisted as `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub seed: u64,
    pub general: String,
    /// `domain -> split -> manifest path` (relative to the dataset root).
    pub manifests: BTreeMap<String, BTreeMap<String, String>>,
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("dataset.json");
        let bytes = std::fs::read(&path).at(&path)?;
        let mut layout: Self =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
        layout.root = root.to_path_buf();
        Ok(layout)
    }

    pub fn manifest_path(&self, domain: &str, split: &str) -> Result<PathBuf> {
        self.manifests
            .get(domain)
            .and_then(|m| m.get(split))
            .map(|p| self.root.join(p))
            .ok_or_else(|| Error::invalid(format!("dataset has no {domain}/{split} split")))
    }

    pub fn manifest(&self, domain: &str, split: &str) -> Result<Manifest> {
        Manifest::load(&self.manifest_path(domain, split)?)
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::load(&self.root.join("tokenizer.json"))
    }

    pub fn adaptation_domains(&self) -> Vec<String> {
        self.manifests
            .keys()
            .filter(|d| **d != self.general)
            .cloned()
            .collect()
    }
}

fn split_code(split: &str) -> u64 {
    str_hash(split)
}

/// Generate manifests and feature files for every domain and split.
pub fn build_dataset(cfg: &CorpusConfig, out: &Path, seed: u64) -> Result<DatasetLayout> {
    cfg.validate()?;
    let tokenizer = cfg.tokenizer()?;
    let specs = cfg.domain_specs(seed)?;
    std::fs::create_dir_all(out).at(out)?;
    tokenizer.save(&out.join("tokenizer.json"))?;
    write_atomic(&out.join("domains.json"), &serde_json::to_vec_pretty(&specs)?)?;

    let mut layout = DatasetLayout {
        seed,
        general: cfg.general.clone(),
        manifests: BTreeMap::new(),
        counts: BTreeMap::new(),
        root: out.to_path_buf(),
    };

    for (dcfg, spec) in cfg.domains.iter().zip(&specs) {
        let dhash = str_hash(&dcfg.name);
        let dir = out.join(&dcfg.name);
        let splits = [
            ("train", dcfg.train),
            ("dev", dcfg.dev),
            ("test", dcfg.test),
            (TEXT_SPLIT, dcfg.text),
        ];
        for (split, count) in splits {
            if count == 0 {
                continue;
            }
            let texts = sample_text(spec, count, derive_seed(seed, &[dhash, split_code(split)]))?;
            let mut records = Vec::with_capacity(count);
            for (i, tokens) in texts.into_iter().enumerate() {
                let id = format!("{}-{}-{:05}", dcfg.name, split, i);
                if split == TEXT_SPLIT {
                    records.push(ManifestRecord {
                        id,
                        path: None,
                        tokens,
                        domain: dcfg.name.clone(),
                        frames: None,
                        spans: None,
                    });
                    continue;
                }
                let useed = utterance_seed(seed, dhash, split_code(split), i as u64);
                let (data, spans) = render_features(&tokens, &cfg.render, useed)?;
                let feats = FeatureSequence::new(&id, &dcfg.name, cfg.render.feature_dim, data)?;
                let rel = format!("feats/{id}.feat");
                write_features(&dir.join(&rel), &feats)?;
                records.push(ManifestRecord {
                    id,
                    path: Some(rel),
                    tokens,
                    domain: dcfg.name.clone(),
                    frames: Some(feats.frames),
                    spans: Some(spans.into_iter().map(|(s, e)| [s, e]).collect()),
                });
            }
            let manifest_rel = format!("{}/{split}.jsonl", dcfg.name);
            Manifest::new(records, &dir).save(&out.join(&manifest_rel))?;
            layout
                .manifests
                .entry(dcfg.name.clone())
                .or_default()
                .insert(split.to_string(), manifest_rel);
            layout
                .counts
                .entry(dcfg.name.clone())
                .or_default()
                .insert(split.to_string(), count);
        }
    }
    write_atomic(&out.join("dataset.json"), &serde_json::to_vec_pretty(&layout)?)?;
    Ok(layout)
}
