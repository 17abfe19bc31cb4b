//! Minimal neural building blocks on top of candle tensors, plus the named
//! parameter store that checkpoints and optimizers operate on.

mod layers;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{rng_for, str_hash};

pub use layers::{
    dropout, log_softmax, sinusoidal_positions, softmax, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, NEG_MASK,
};

/// Numeric precision of a model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Declared shape and initializer of one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Declare a `Linear` layer's weight (`in × out`) and bias.
pub fn linear_specs(specs: &mut Vec<ParamSpec>, name: &str, d_in: usize, d_out: usize) {
    let std = (1.0 / d_in as f64).sqrt();
    specs.push(ParamSpec::new(format!("{name}.weight"), &[d_in, d_out], Init::Normal(std)));
    specs.push(ParamSpec::new(format!("{name}.bias"), &[d_out], Init::Zeros));
}

pub fn layer_norm_specs(specs: &mut Vec<ParamSpec>, name: &str, dim: usize) {
    specs.push(ParamSpec::new(format!("{name}.gamma"), &[dim], Init::Ones));
    specs.push(ParamSpec::new(format!("{name}.beta"), &[dim], Init::Zeros));
}

/// Named parameters, ordered by name. The first dotted component of a name is
/// its partition (`encoder`, `ctc`, `lm`, `acoustic`).
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    precision: Precision,
}

impl ParamStore {
    /// Fresh parameters. Each one draws from its own stream keyed by its name,
    /// so adding a parameter never perturbs the others.
    pub fn initialize(specs: &[ParamSpec], precision: Precision, seed: u64) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let values: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let mut rng = rng_for(seed, &[str_hash(&spec.name)]);
                    let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            let t = tensor_from_f64(values, &spec.shape, precision)?;
            if vars.insert(spec.name.clone(), Var::from_tensor(&t)?).is_some() {
                return Err(Error::invalid(format!("parameter {} declared twice", spec.name)));
            }
        }
        Ok(Self { vars, precision })
    }

    /// Wrap loaded tensors, checking them against the declared specs.
    pub fn from_tensors(
        specs: &[ParamSpec],
        mut tensors: BTreeMap<String, Tensor>,
        precision: Precision,
    ) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for spec in specs {
            let t = tensors
                .remove(&spec.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {}", spec.name)))?;
            if t.dims() != spec.shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.dims(),
                    spec.shape
                )));
            }
            let t = t.to_dtype(precision.dtype())?;
            vars.insert(spec.name.clone(), Var::from_tensor(&t)?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::invalid(format!("unexpected parameter {extra}")));
        }
        Ok(Self { vars, precision })
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn partition_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }

    pub fn in_partition<'a>(&'a self, partition: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> {
        self.vars
            .iter()
            .filter(move |(n, _)| Self::partition_of(n) == partition)
    }

    /// Overwrite one parameter's values in place.
    pub fn set(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        let t = tensor_from_f64(values.to_vec(), var.dims(), self.precision)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        tensor_to_f64(&self.get(name)?)
    }

    /// Copy every parameter of `partition` from another store with the same layout.
    pub fn copy_partition_from(&self, other: &ParamStore, partition: &str) -> Result<()> {
        for (name, _) in self.in_partition(partition) {
            let src = other.get(name)?.to_dtype(self.precision.dtype())?;
            self.vars[name].set(&src)?;
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

pub fn tensor_from_f64(values: Vec<f64>, shape: &[usize], precision: Precision) -> Result<Tensor> {
    let t = match precision {
        Precision::F64 => Tensor::from_vec(values, shape, &Device::Cpu)?,
        Precision::F32 => {
            let v: Vec<f32> = values.into_iter().map(|x| x as f32).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
    };
    Ok(t)
}

pub fn tensor_to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
