//! Synthetic bi-domain speech corpus: Markov-chain text, prototype-based
//! feature rendering, tokenizer and manifests.

mod dataset;
mod domain;
mod manifest;
mod render;
mod tokenizer;

pub use dataset::{build_dataset, CorpusConfig, DatasetLayout, DomainConfig, AUDIO_SPLITS, TEXT_SPLIT};
pub use domain::{bigram_distribution, sample_text, total_variation, ChainShape, DomainSpec};
pub use manifest::{Manifest, ManifestRecord, Utterance};
pub use render::{read_features, render_features, write_features, FeatureSequence, RenderSpec};
pub use tokenizer::Tokenizer;
