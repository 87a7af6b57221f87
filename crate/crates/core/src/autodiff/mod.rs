//! Minimal dense reverse-mode automatic differentiation.
//!
//! Values are 2-D `f64` matrices. A [`Tape`] records one forward pass, a
//! [`ParamSet`] owns the learnable tensors and their gradient accumulators,
//! and [`AdamState`] updates them.

mod adam;
mod gradcheck;
mod tape;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{linear, softmax, topk_indices, Tape, Var};

use ndarray::Array2;
use thiserror::Error;

/// Dense row-major matrix used for every value and gradient.
pub type Mat = Array2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFiniteDetected { op: &'static str },
    #[error("variable is not recorded on this tape")]
    NotOnTape,
    #[error("expected a 1x1 scalar, got {shape:?}")]
    NotScalar { shape: (usize, usize) },
    #[error("index {index} out of range for {len} rows in {op}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{op} on an empty input")]
    EmptyInput { op: &'static str },
    #[error("{0}")]
    InvalidArgument(&'static str),
}

/// A named learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Mat,
    pub requires_grad: bool,
    pub grad: Option<Mat>,
}

impl Tensor {
    pub fn param(name: impl Into<String>, value: Mat) -> Self {
        Self {
            name: name.into(),
            value,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

/// Ordered collection of parameters; positions are stable handles.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Tensor) -> usize {
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Total number of scalar entries.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    fn accumulate(&mut self, i: usize, g: &Mat) {
        let t = &mut self.tensors[i];
        if !t.requires_grad {
            return;
        }
        match &mut t.grad {
            Some(existing) => *existing += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }
}
