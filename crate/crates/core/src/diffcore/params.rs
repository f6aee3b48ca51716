use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DiffArray, Gradients, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Named parameter arrays keyed by stable dotted paths.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: BTreeMap<String, DiffArray<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, value: DiffArray<S>) {
        self.params.insert(key.into(), value.detach());
    }

    pub fn get(&self, key: &str) -> Option<&DiffArray<S>> {
        self.params.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.params.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(DiffArray::len).sum()
    }

    /// Gaussian init with standard deviation `scale / sqrt(fan_in)`.
    pub fn init_weight(&mut self, key: &str, rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) {
        let std = scale / (rows.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let values = (0..rows * cols).map(|_| S::lit(normal.sample(rng))).collect();
        self.insert(key, DiffArray::new(vec![rows, cols], values).expect("shape"));
    }

    pub fn init_const(&mut self, key: &str, shape: &[usize], value: f64) {
        self.insert(key, DiffArray::full(shape, S::lit(value)));
    }

    pub fn init_normal(&mut self, key: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let values = (0..n).map(|_| S::lit(normal.sample(rng))).collect();
        self.insert(key, DiffArray::new(shape.to_vec(), values).expect("shape"));
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound<S> {
        Bound {
            arrays: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v)))
                .collect(),
        }
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> Bound<S> {
        Bound {
            arrays: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v)))
                .collect(),
        }
    }

    /// Unbound view, for forward passes whose gradients are not needed.
    pub fn view(&self) -> Bound<S> {
        Bound {
            arrays: self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(DiffArray::all_finite)
    }

    /// Overwrites the value of an existing key, keeping its shape.
    pub fn set_values(&mut self, key: &str, values: Vec<S>) -> Result<()> {
        let old = self
            .params
            .get(key)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {key}")))?;
        let shape = old.shape().to_vec();
        self.params.insert(key.to_string(), DiffArray::new(shape, values)?);
        Ok(())
    }

    /// Adds every parameter of `other` under `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore<S>) {
        for (k, v) in &other.params {
            self.params.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Parameters under `prefix.` with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamStore<S> {
        let lead = format!("{prefix}.");
        ParamStore {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            meta: BTreeMap::new(),
            params: self
                .params
                .iter()
                .map(|(k, v)| {
                    let mut bytes = Vec::with_capacity(v.len() * 8);
                    for x in v.values() {
                        bytes.extend_from_slice(&x.as_f64().to_le_bytes());
                    }
                    (
                        k.clone(),
                        StoredArray {
                            shape: v.shape().to_vec(),
                            values: StoredValues::Base64 {
                                f64le: STANDARD.encode(bytes),
                            },
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut store = Self::new();
        for (k, stored) in &ckpt.params {
            let values: Vec<f64> = match &stored.values {
                StoredValues::Plain(v) => v.clone(),
                StoredValues::Base64 { f64le } => {
                    let bytes = STANDARD
                        .decode(f64le)
                        .map_err(|e| Error::Invalid(format!("{k}: bad base64: {e}")))?;
                    if bytes.len() % 8 != 0 {
                        return Err(Error::Invalid(format!("{k}: truncated f64 payload")));
                    }
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect()
                }
            };
            let values = values.into_iter().map(S::lit).collect();
            store.insert(k.clone(), DiffArray::new(stored.shape.clone(), values)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

pub const CHECKPOINT_FORMAT: &str = "flat-params-v1";

/// On-disk parameter container: flat key → (shape, values).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub format: String,
    /// Free-form provenance such as the producing config hash.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
    pub params: BTreeMap<String, StoredArray>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StoredArray {
    pub shape: Vec<usize>,
    pub values: StoredValues,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum StoredValues {
    Plain(Vec<f64>),
    Base64 { f64le: String },
}

/// Parameters linked into one tape, looked up by key during a forward pass.
#[derive(Clone, Debug)]
pub struct Bound<S> {
    arrays: HashMap<String, DiffArray<S>>,
}

impl<S: Scalar> Bound<S> {
    pub fn from_arrays(arrays: impl IntoIterator<Item = (String, DiffArray<S>)>) -> Self {
        Self {
            arrays: arrays.into_iter().collect(),
        }
    }

    pub fn get(&self, key: &str) -> Result<&DiffArray<S>> {
        self.arrays
            .get(key)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {key}")))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.arrays.contains_key(key)
    }

    /// Collects the gradient of every bound parameter.
    pub fn gradients(&self, grads: &Gradients<S>) -> BTreeMap<String, Vec<S>> {
        self.arrays
            .iter()
            .map(|(k, v)| (k.clone(), grads.get(v).to_vec()))
            .collect()
    }
}
