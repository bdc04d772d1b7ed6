//! Named parameter storage shared by the model, optimizer, and checkpoints.
//!
//! Parameters are allocated once in a fixed order and bound into a fresh
//! [`Tape`] at the start of every forward pass, always as the first nodes.
//! The [`TensorId`] returned at allocation therefore stays valid for every
//! tape bound from the same store, which lets layer structs hold plain ids.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, TensorId};

/// Initialization scheme for a parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    data: Vec<Vec<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), shapes: Vec::new(), data: Vec::new() }
    }

    pub fn alloc(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut SplitMix64) -> TensorId {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let n = rows * cols;
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(sigma) => (0..n).map(|_| T::from_f64c(rng.normal() * sigma)).collect(),
            Init::XavierUniform => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| T::from_f64c(rng.range_f64(-a, a))).collect()
            }
        };
        self.names.push(name.to_string());
        self.shapes.push((rows, cols));
        self.data.push(data);
        TensorId(self.data.len() - 1)
    }

    /// Push every parameter into an empty tape, in allocation order, so the
    /// allocation-time [`TensorId`]s address the bound copies.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<()> {
        if tape.num_nodes() != 0 {
            return Err(Error::Usage("parameters must be bound into an empty tape".into()));
        }
        for i in 0..self.data.len() {
            let (r, c) = self.shapes[i];
            tape.leaf(r, c, self.data[i].clone(), trainable)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.data.iter().map(|d| d.len()).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> (usize, usize) {
        self.shapes[i]
    }

    pub fn values(&self, i: usize) -> &[T] {
        &self.data[i]
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i]
    }

    /// Replace the contents of parameter `i`; shape must match.
    pub fn set_values(&mut self, i: usize, values: Vec<T>) -> Result<()> {
        let (r, c) = self.shapes[i];
        if values.len() != r * c {
            return Err(Error::dim("set_values", format!("{} vs {r}x{c}", values.len())));
        }
        self.data[i] = values;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}
