//! Sequence models and their named parameters.
//!
//! Parameter names follow `<block>.<layer>.<name>`, e.g. `encoder.0.attn_wq`.

mod linear;
mod transformer;

pub use linear::LinearModel;
pub use transformer::{strip_bos_eos, DecodeState, EncodedSource, Transformer, TransformerConfig, Variant};

use std::any::Any;
use std::collections::HashMap;
use std::fmt;

use rand::RngCore;
use thiserror::Error;

use crate::pipeline::Batch;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence length {len} exceeds max_positions {max}")]
    PositionOverflow { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("batch has no target side")]
    MissingTarget,
    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its slot.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<usize, ModelError> {
        if self.index.contains_key(name) {
            return Err(ModelError::ParamMismatch(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`; gradients are tracked when the
    /// tape allows it.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect()
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }

    /// Replaces every value; names and shapes must match exactly.
    pub fn assign(&mut self, entries: &[(String, Tensor)]) -> Result<(), ModelError> {
        if entries.len() != self.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} parameters, found {}",
                self.len(),
                entries.len()
            )));
        }
        for (name, t) in entries {
            let slot = *self
                .index
                .get(name)
                .ok_or_else(|| ModelError::ParamMismatch(format!("unexpected parameter `{name}`")))?;
            if self.tensors[slot].shape() != t.shape() {
                return Err(ModelError::ParamMismatch(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[slot].shape()
                )));
            }
        }
        for (name, t) in entries {
            let slot = self.index[name];
            self.tensors[slot] = t.clone();
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}

/// Dropout randomness for a training forward pass; `None` means inference.
pub type DropRng<'a> = Option<&'a mut dyn RngCore>;

pub trait SeqModel: Send + Sync + fmt::Debug {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn vocab_size(&self) -> usize;

    /// Logits `[N, V]` (any leading shape) with one target id per row;
    /// pad targets are ignored by the loss.
    fn teacher_forced(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        rng: DropRng<'_>,
    ) -> Result<(Var, Vec<usize>), ModelError>;

    fn as_transformer(&self) -> Option<&Transformer> {
        None
    }

    fn as_any(&self) -> &dyn Any;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assign_checks_names_and_shapes() {
        let mut s = ParamStore::new();
        s.add("a.0.w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a.0.w", Tensor::zeros(&[2])).is_err());
        assert!(s.assign(&[("a.0.w".into(), Tensor::zeros(&[3]))]).is_err());
        assert!(s.assign(&[("b.0.w".into(), Tensor::zeros(&[2]))]).is_err());
        s.assign(&[("a.0.w".into(), Tensor::vector(vec![1.0, 2.0]))]).unwrap();
        assert_eq!(s.get("a.0.w").unwrap().data(), [1.0, 2.0]);
    }
}
