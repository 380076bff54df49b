//! Named parameter storage with per-parameter trainable flags.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is the checkpoint
/// order, so two stores built by the same code serialize identically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} already exists")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        value.expect_shape(self.get(id).shape(), self.name(id))?;
        self.params[id.0].value = value;
        Ok(())
    }
}

/// Uniform `[-bound, bound)` values on the `f32` grid, so a checkpoint
/// round-trip reproduces them exactly.
pub(crate) fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| (rng.gen_range(-bound..bound)) as f32 as f64).collect();
    Tensor::from_vec(rows, cols, data).expect("sized by construction")
}

/// Approximately normal values (sum of uniforms), also on the `f32` grid.
pub(crate) fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let s: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
            (s * std) as f32 as f64
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized by construction")
}
