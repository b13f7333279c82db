use std::collections::BTreeMap;

use diffmath::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scenegen::format::{ArrayData, BlockFile};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled {
        fan_in: usize,
        gain: f64,
    },
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

// Each tensor draws from its own stream keyed by (seed, name), so configs
// that differ in a few parameters still share every other initial value.
fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let h = crc32fast::hash(name.as_bytes()) as u64;
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (h << 16) ^ h)
}

impl ParamStore {
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for s in specs {
            let std = match s.init {
                Init::Zeros => 0.0,
                Init::Scaled { fan_in, gain } => gain / (fan_in as f64).sqrt(),
                Init::Normal(std) => std,
            };
            let t = if std == 0.0 {
                Tensor::zeros(&s.shape)
            } else {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
                let mut rng = stream(seed, &s.name);
                Tensor::from_fn(&s.shape, |_| normal.sample(&mut rng))
            };
            if tensors.insert(s.name.clone(), t).is_some() {
                return Err(Error::Contract(format!("duplicate parameter `{}`", s.name)));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Append one `f64` array per parameter to `file`.
    pub fn write_into(&self, file: &mut BlockFile) -> Result<()> {
        for (name, t) in &self.tensors {
            file.push(name, t.shape(), ArrayData::F64(t.data().to_vec()))?;
        }
        Ok(())
    }

    /// Read every parameter of `specs` from `file`, checking shapes.
    pub fn read_from(file: &BlockFile, specs: &[ParamSpec]) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for s in specs {
            let (dims, data) = file.f64s(&s.name)?;
            if dims != s.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{}` stored as {dims:?}, model expects {:?}",
                    s.name, s.shape
                )));
            }
            tensors.insert(s.name.clone(), Tensor::new(dims.to_vec(), data.to_vec())?);
        }
        Ok(Self { tensors })
    }
}

/// One forward (and optionally backward) pass: the tape plus the
/// parameters bound to it so far.
///
/// Parameters are bound on first use, so parts of the model that are not
/// evaluated add nothing to the tape.
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
    pub(crate) trace: Option<Vec<FusionTrace>>,
}

/// Bookkeeping recorded by one depth-guided fusion call.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrace {
    pub modality: String,
    pub level: usize,
    pub windows: usize,
    pub rgb_tokens: usize,
    pub query_tokens: usize,
    pub output_tokens: usize,
    /// Largest `|row sum - 1|` over every attention matrix of the call.
    pub max_row_sum_dev: f64,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            trainable,
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn traces(&self) -> &[FusionTrace] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.tape.grad(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}
