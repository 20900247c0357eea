use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tensor;

/// Which part of the network a tensor belongs to; drives freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Prompt,
    Timestep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named learnable tensors plus the trainability mask.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenoiserParams {
    entries: Vec<ParamEntry>,
}

impl DenoiserParams {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.trainable).collect()
    }

    /// Freezes every encoder tensor (when `freeze_encoder`) and every tensor
    /// whose name starts with one of `prefixes`; everything else trains.
    pub fn set_freeze(&mut self, freeze_encoder: bool, prefixes: &[String]) {
        for e in &mut self.entries {
            let by_group = freeze_encoder && e.group == ParamGroup::Encoder;
            let by_name = prefixes.iter().any(|p| e.name.starts_with(p.as_str()));
            e.trainable = !(by_group || by_name);
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for e in &self.entries {
            if e.tensor.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {}", e.name)));
            }
        }
        Ok(())
    }

    /// Copies all encoder tensors from `source` by name (pretrained backbone).
    pub fn import_encoder(&mut self, source: &DenoiserParams) -> Result<usize> {
        let mut copied = 0;
        for e in self.entries.iter_mut().filter(|e| e.group == ParamGroup::Encoder) {
            let src = source
                .entries
                .iter()
                .find(|s| s.name == e.name)
                .ok_or_else(|| Error::Checkpoint(format!("encoder tensor {} missing in source", e.name)))?;
            if src.tensor.shape() != e.tensor.shape() {
                return Err(Error::shape(e.tensor.shape(), src.tensor.shape()));
            }
            e.tensor = src.tensor.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Replaces tensor values from `(name, tensor)` pairs, requiring an exact
    /// name and shape match for every entry.
    pub fn replace_all(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (e, (name, t)) in self.entries.iter_mut().zip(tensors) {
            if e.name != name {
                return Err(Error::Checkpoint(format!("expected tensor {}, found {name}", e.name)));
            }
            if e.tensor.shape() != t.shape() {
                return Err(Error::shape(e.tensor.shape(), t.shape()));
            }
            e.tensor = t;
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, name: String, group: ParamGroup, tensor: Tensor) -> usize {
        self.entries.push(ParamEntry {
            name,
            group,
            tensor,
            trainable: true,
        });
        self.entries.len() - 1
    }
}

/// How a freshly registered tensor is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Normal with std `1/sqrt(fan_in)`, resampled outside two std.
    FanIn(usize),
}

/// Registers tensors into a [`DenoiserParams`] under a name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    params: &'a mut DenoiserParams,
    rng: &'a mut R,
    prefix: String,
    group: ParamGroup,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(params: &'a mut DenoiserParams, rng: &'a mut R, group: ParamGroup) -> Self {
        Self {
            params,
            rng,
            prefix: String::new(),
            group,
        }
    }

    pub fn scoped<T>(&mut self, name: &str, group: ParamGroup, f: impl FnOnce(&mut ParamBuilder<'_, R>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut child = ParamBuilder {
            params: &mut *self.params,
            rng: &mut *self.rng,
            prefix,
            group,
        };
        f(&mut child)
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::FanIn(fan_in) => {
                let std = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| loop {
                        let z: f64 = self.rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let tensor = Tensor::new(shape.to_vec(), data).expect("shape product matches data");
        self.params.push(full, self.group, tensor)
    }
}
