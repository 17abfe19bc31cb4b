use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::{read_features, FeatureSequence};
use crate::error::{Error, Result};
use crate::util::{read_json_lines, write_json_lines};

/// One manifest line. Text-only records have no `path`, `frames` or `spans`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Feature file, relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub tokens: Vec<u32>,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    /// Gold `[start, end)` frame span per token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            records,
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = read_json_lines(path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { records, base_dir })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_lines(path, &self.records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn features(&self, rec: &ManifestRecord) -> Result<FeatureSequence> {
        let rel = rec
            .path
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record {} is text-only", rec.id)))?;
        read_features(&self.base_dir.join(rel), &rec.id, &rec.domain)
    }

    /// Load features for every record, paired with its tokens.
    pub fn load_utterances(&self) -> Result<Vec<Utterance>> {
        self.records
            .iter()
            .map(|r| {
                Ok(Utterance {
                    features: self.features(r)?,
                    tokens: r.tokens.clone(),
                    spans: r.spans.clone(),
                })
            })
            .collect()
    }

    pub fn token_sequences(&self) -> Vec<Vec<u32>> {
        self.records.iter().map(|r| r.tokens.clone()).collect()
    }
}

/// Features plus transcript, in memory.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub features: FeatureSequence,
    pub tokens: Vec<u32>,
    pub spans: Option<Vec<[usize; 2]>>,
}
