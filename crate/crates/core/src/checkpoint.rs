//! On-disk model checkpoints.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! metadata.json        config snapshot, vocab, step, seed, partition table
//! tokenizer.json       optional copy of the tokenizer
//! params/<name>.bin    one array per parameter
//! optim/<name>.m.bin   optimizer moments, when training state is saved
//! optim/<name>.v.bin
//! ```
//!
//! Array files are `HARR`, a dtype byte (0 = f32, 1 = f64), three zero bytes,
//! a u32 rank, u32 dims, then the little-endian values in row-major order.
//! Parameters are stored at the model precision, optimizer moments at f64.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Tokenizer;
use crate::error::{Error, IoContext, Result};
use crate::lm_decoder::Vocab;
use crate::model::{HaedModel, ModelConfig};
use crate::nn::{tensor_to_f64, ParamStore, Precision};
use crate::util::write_atomic;

pub const PARTITIONS: [&str; 4] = ["encoder", "ctc", "lm", "acoustic"];
const MAGIC: &[u8; 4] = b"HARR";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub step: u64,
    pub seed: u64,
    /// Parameter name to partition.
    pub partitions: BTreeMap<String, String>,
    /// Free-form provenance: training or adaptation settings, config fingerprint.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Optimizer moments keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: HaedModel,
    pub optim: Option<OptimState>,
    pub tokenizer: Option<Tokenizer>,
}

pub fn partition_table(store: &ParamStore) -> Result<BTreeMap<String, String>> {
    store
        .names()
        .map(|n| {
            let p = ParamStore::partition_of(n);
            if PARTITIONS.contains(&p) {
                Ok((n.clone(), p.to_string()))
            } else {
                Err(Error::invalid(format!("parameter {n} belongs to no partition")))
            }
        })
        .collect()
}

fn array_bytes(values: &[f64], shape: &[usize], precision: Precision) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * shape.len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.push(match precision {
        Precision::F32 => 0,
        Precision::F64 => 1,
    });
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match precision {
        Precision::F32 => values.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Precision::F64 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn write_array(path: &Path, values: &[f64], shape: &[usize], precision: Precision) -> Result<()> {
    write_atomic(path, &array_bytes(values, shape, precision))
}

/// Read an array file: (values widened to f64, shape, stored precision).
pub fn read_array(path: &Path) -> Result<(Vec<f64>, Vec<usize>, Precision)> {
    let bytes = fs::read(path).at(path)?;
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing array header"));
    }
    let precision = match bytes[4] {
        0 => Precision::F32,
        1 => Precision::F64,
        _ => return Err(bad("unknown dtype")),
    };
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let rank = u32_at(8);
    let data_start = 12 + 4 * rank;
    if bytes.len() < data_start {
        return Err(bad("truncated shape"));
    }
    let shape: Vec<usize> = (0..rank).map(|i| u32_at(12 + 4 * i)).collect();
    let n: usize = shape.iter().product();
    let width = if precision == Precision::F32 { 4 } else { 8 };
    if bytes.len() != data_start + n * width {
        return Err(bad("data length does not match shape"));
    }
    let data = &bytes[data_start..];
    let values = match precision {
        Precision::F32 => data
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        Precision::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((values, shape, precision))
}

fn param_file(dir: &Path, sub: &str, name: &str, suffix: &str) -> PathBuf {
    dir.join(sub).join(format!("{name}{suffix}.bin"))
}

impl Checkpoint {
    pub fn new(model: HaedModel, step: u64, seed: u64) -> Result<Self> {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            config: model.config().clone(),
            vocab: *model.vocab(),
            step,
            seed,
            partitions: partition_table(model.store())?,
            extra: BTreeMap::new(),
        };
        Ok(Self {
            meta,
            model,
            optim: None,
            tokenizer: None,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let store = self.model.store();
        let precision = store.precision();
        let mut meta = self.meta.clone();
        meta.partitions = partition_table(store)?;
        meta.config = self.model.config().clone();
        meta.extra.remove("optim_step");
        if dir.exists() {
            // stale files from an earlier layout must not survive
            for sub in ["params", "optim"] {
                let p = dir.join(sub);
                if p.exists() {
                    fs::remove_dir_all(&p).at(&p)?;
                }
            }
        }
        for (name, var) in store.iter() {
            let values = tensor_to_f64(var.as_tensor())?;
            write_array(&param_file(dir, "params", name, ""), &values, var.dims(), precision)?;
        }
        if let Some(opt) = &self.optim {
            for (name, m) in &opt.m {
                let v = opt
                    .v
                    .get(name)
                    .ok_or_else(|| Error::invalid(format!("optimizer state for {name} lacks v")))?;
                write_array(&param_file(dir, "optim", name, ".m"), m, &[m.len()], Precision::F64)?;
                write_array(&param_file(dir, "optim", name, ".v"), v, &[v.len()], Precision::F64)?;
            }
            meta.extra.insert("optim_step".into(), opt.step.into());
        }
        if let Some(tok) = &self.tokenizer {
            tok.save(&dir.join("tokenizer.json"))?;
        }
        let mut json = serde_json::to_vec_pretty(&meta)?;
        json.push(b'\n');
        write_atomic(&dir.join("metadata.json"), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("metadata.json");
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&meta_path).at(&meta_path)?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::format(&meta_path, format!("unsupported format {}", meta.format_version)));
        }
        let specs = HaedModel::param_specs(&meta.config, &meta.vocab);
        let precision = meta.config.precision;
        let mut tensors = BTreeMap::new();
        for spec in &specs {
            let path = param_file(dir, "params", &spec.name, "");
            let (values, shape, stored) = read_array(&path)?;
            if stored != precision {
                return Err(Error::format(&path, "stored precision differs from the model config"));
            }
            let t = crate::nn::tensor_from_f64(values, &shape, precision)?;
            tensors.insert(spec.name.clone(), t);
        }
        let store = ParamStore::from_tensors(&specs, tensors, precision)?;
        let table = partition_table(&store)?;
        if table != meta.partitions {
            return Err(Error::format(&meta_path, "partition table does not match the parameters"));
        }
        let model = HaedModel::from_store(&meta.config, meta.vocab, store)?;

        let optim = match meta.extra.get("optim_step").and_then(|v| v.as_u64()) {
            Some(step) => {
                let mut st = OptimState {
                    step,
                    ..OptimState::default()
                };
                for spec in &specs {
                    let m_path = param_file(dir, "optim", &spec.name, ".m");
                    if !m_path.exists() {
                        continue;
                    }
                    st.m.insert(spec.name.clone(), read_array(&m_path)?.0);
                    st.v.insert(
                        spec.name.clone(),
                        read_array(&param_file(dir, "optim", &spec.name, ".v"))?.0,
                    );
                }
                Some(st)
            }
            None => None,
        };
        let tok_path = dir.join("tokenizer.json");
        let tokenizer = if tok_path.exists() {
            Some(Tokenizer::load(&tok_path)?)
        } else {
            None
        };
        Ok(Self {
            meta,
            model,
            optim,
            tokenizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trip_both_precisions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let vals = [1.5, -2.25, 1e-3, 7.0, 0.1, 3.0];
        write_array(&p, &vals, &[2, 3], Precision::F64).unwrap();
        let (v, s, pr) = read_array(&p).unwrap();
        assert_eq!((v.as_slice(), s.as_slice(), pr), (&vals[..], &[2usize, 3][..], Precision::F64));
        write_array(&p, &vals, &[6], Precision::F32).unwrap();
        let (v, _, pr) = read_array(&p).unwrap();
        assert_eq!(pr, Precision::F32);
        assert_eq!(v[4], f64::from(0.1f32));
    }

    #[test]
    fn corrupt_array_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_array(&p, &[1.0, 2.0], &[2], Precision::F32).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(read_array(&p).is_err());
        fs::write(&p, b"nope").unwrap();
        assert!(read_array(&p).is_err());
    }
}
