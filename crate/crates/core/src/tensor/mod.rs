//! Dense row-major `f64` arrays and a tape-based reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain value (shape + flat data). A [`Graph`] owns every
//! intermediate produced while evaluating a model and records one
//! [`OpRecord`] per operation whose inputs need gradients. Calling
//! [`Graph::backward`] on a scalar walks the records in reverse insertion
//! order and accumulates `∂loss/∂leaf` into each leaf created with
//! [`Graph::param`].
//!
//! There is no implicit broadcasting. The only op that mixes shapes is
//! [`OpKind::ScalarMul`], which scales a tensor by a one-element tensor.
//! Everything else needs an explicit [`OpKind::Expand`], reshape or concat.

mod gradcheck;
mod graph;
mod io;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{DiffTensor, Graph, NodeId, OpKind, OpRecord, Var};
#[cfg(test)]
pub(crate) use graph::sigmoid;
pub use io::{read_named_tensors, write_named_tensors, NamedTensor};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of nothing".into()))?;
        let mut cat = Self::stack0(parts)?;
        if parts.iter().any(|p| p.shape != first.shape) {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", first.shape, cat.shape)));
        }
        cat.shape = [parts.len()].into_iter().chain(first.shape.iter().copied()).collect();
        Ok(cat)
    }

    /// Concatenate along axis 0. All inputs must share the trailing extents.
    pub fn stack0(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack0 of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(
                    "stack0",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    }
}
