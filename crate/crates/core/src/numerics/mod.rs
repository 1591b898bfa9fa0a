//! Minimal dense-array engine with reverse-mode differentiation.
//!
//! Everything runs on 64-bit floats so analytic gradients can be verified
//! against central finite differences at tight tolerances. Computation is
//! recorded on a tape ([`Graph`]); calling [`Graph::backward`] replays it in
//! reverse. A graph is single-threaded by construction; independent graphs
//! may run on independent workers.

mod adam;
mod graph;
pub mod gradcheck;

pub use adam::AdamState;
pub use graph::{DifferentiableValue, Graph, ValueId};

use crate::error::{Error, Result};

/// Plain dense array: shape plus row-major data. Not differentiable on its
/// own; it becomes differentiable when inserted into a [`Graph`] as a leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A learnable tensor together with the gradient produced by the most recent
/// backward pass. The optimizer consumes and clears the gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub tensor: Tensor,
    pub grad: Option<Vec<f64>>,
}

impl Parameter {
    pub fn new(tensor: Tensor) -> Self {
        Parameter { tensor, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    /// Accumulate a gradient buffer (adds when one is already present).
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }
}
