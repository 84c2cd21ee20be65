//! Minimal reverse-mode automatic differentiation over dense tensors, with
//! the layer set used by the translation model, the Adam optimizer, a
//! linear-decay learning-rate schedule and a flat binary checkpoint format.

mod conv;
mod graph;
mod nce;
mod norm;
mod optim;
mod scalar;
mod tensor;

pub mod checkpoint;

pub use graph::{Graph, NormStats, PadMode, Var};
pub use norm::{NormKind, NORM_EPS};
pub use optim::{Adam, AdamConfig, LinearDecaySchedule};
pub use scalar::Scalar;
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutogradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph cycle through node {0}")]
    GraphCycle(usize),
    #[error("normalization group of {0} element(s) has no variance to estimate")]
    DegenerateBatch(usize),
    #[error("contrastive loss needs at least 2 patches per image, got {0}")]
    DegenerateSamples(usize),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named learnable tensors of one model component. The `tag` distinguishes
/// stores inside a shared [`Graph`] (e.g. generator vs. discriminator).
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    tag: String,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(tag: &str) -> Self {
        Self {
            tag: tag.to_string(),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Tensor drawn from N(mean, std²).
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        mean: f64,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(mean, std).expect("valid normal");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches"))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::of(v)))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Overwrite values from `(name, tensor)` pairs; every parameter must be
    /// present with a matching shape.
    pub fn load<U: Scalar>(
        &mut self,
        entries: &[(String, Tensor<U>)],
    ) -> Result<(), AutogradError> {
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| AutogradError::UnknownParam(name.clone()))?;
            if t.shape() != self.values[i].shape() {
                return Err(AutogradError::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.cast();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tag: self.tag.clone(),
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}
