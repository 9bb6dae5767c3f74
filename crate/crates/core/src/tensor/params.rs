use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DenseArray;
use crate::error::{Error, Result};

/// Learning-rate group for a trainable array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Transformer encoder stacks (the backbone stand-ins).
    Encoder,
    /// Everything else: tokenizers, class tokens, projections, selection, head.
    Head,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Head => "head",
        }
    }
}

/// How a parameter is (re)initialized by [`ParamStore::initialize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitRule {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    /// Uniform in `±sqrt(6 / fan_in)`; used for the convolution-like patch embeddings.
    Kaiming { fan_in: usize },
    Normal { std: f64 },
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub group: Group,
    pub array: DenseArray,
    pub init: InitRule,
    /// Frozen parameters are graph constants: they never receive gradient.
    pub frozen: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Owns every trainable array of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: Group,
        array: DenseArray,
        init: InitRule,
        decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            group,
            array,
            init,
            frozen: false,
            decay,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseArray {
        &self.params[id.0].array
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.params[id.0].array
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_frozen_where(&mut self, frozen: bool, pred: impl Fn(&Parameter) -> bool) {
        for p in &mut self.params {
            if pred(p) {
                p.frozen = frozen;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.array.len()).sum()
    }

    /// Re-draw every parameter from its [`InitRule`], in registration order,
    /// from a generator seeded with `seed`.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            match p.init {
                InitRule::Xavier { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    fill_uniform(p.array.data_mut(), bound, &mut rng);
                }
                InitRule::Kaiming { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    fill_uniform(p.array.data_mut(), bound, &mut rng);
                }
                InitRule::Normal { std } => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    for v in p.array.data_mut() {
                        *v = dist.sample(&mut rng);
                    }
                }
                InitRule::Constant(c) => p.array.data_mut().fill(c),
            }
        }
    }

    /// Copy values from `other` (same layout) into this store.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.array.shape() != src.array.shape() {
                return Err(Error::Checkpoint(format!(
                    "layout mismatch at `{}` {:?} vs `{}` {:?}",
                    dst.name,
                    dst.array.shape(),
                    src.name,
                    src.array.shape()
                )));
            }
            dst.array = src.array.clone();
        }
        Ok(())
    }
}

fn fill_uniform(data: &mut [f64], bound: f64, rng: &mut ChaCha8Rng) {
    for v in data {
        *v = rng.random_range(-bound..bound);
    }
}
