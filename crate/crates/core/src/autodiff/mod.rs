//! Minimal tensor engine: reverse-mode differentiation over a per-step tape,
//! a stop-gradient marker, and forward-mode JVPs via dual tensors.

pub(crate) mod kernels;

mod dual;
mod tape;
mod tensor;

pub use dual::{jvp, DualTensor};
pub use tape::{backward, Gradients, Tape};
pub use tensor::{stop_gradient, Tensor};

use crate::error::Result;

/// The primitive set, abstracted over plain tensors and dual tensors so a
/// network's forward pass is written once and reused by the tracked, eval and
/// JVP paths.
pub trait TensorOps: Sized + Clone {
    /// Bring an untracked value in as a constant of this numeric type.
    fn lift(t: &Tensor) -> Self;
    fn shape(&self) -> &[usize];
    fn add(&self, o: &Self) -> Result<Self>;
    fn sub(&self, o: &Self) -> Result<Self>;
    fn mul(&self, o: &Self) -> Result<Self>;
    fn matmul(&self, o: &Self) -> Result<Self>;
    fn scale(&self, c: f64) -> Self;
    fn silu(&self) -> Self;
    fn relu(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn square(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn sum(&self) -> Self;
    fn mean(&self) -> Self;
    fn concat_cols(parts: &[&Self]) -> Result<Self>;
    fn broadcast_rows(&self, rows: usize) -> Result<Self>;
}

impl TensorOps for Tensor {
    fn lift(t: &Tensor) -> Self {
        t.stop_gradient()
    }
    fn shape(&self) -> &[usize] {
        Tensor::shape(self)
    }
    fn add(&self, o: &Self) -> Result<Self> {
        Tensor::add(self, o)
    }
    fn sub(&self, o: &Self) -> Result<Self> {
        Tensor::sub(self, o)
    }
    fn mul(&self, o: &Self) -> Result<Self> {
        Tensor::mul(self, o)
    }
    fn matmul(&self, o: &Self) -> Result<Self> {
        Tensor::matmul(self, o)
    }
    fn scale(&self, c: f64) -> Self {
        Tensor::scale(self, c)
    }
    fn silu(&self) -> Self {
        Tensor::silu(self)
    }
    fn relu(&self) -> Self {
        Tensor::relu(self)
    }
    fn sin(&self) -> Self {
        Tensor::sin(self)
    }
    fn cos(&self) -> Self {
        Tensor::cos(self)
    }
    fn square(&self) -> Self {
        Tensor::square(self)
    }
    fn sqrt(&self) -> Self {
        Tensor::sqrt(self)
    }
    fn sum(&self) -> Self {
        Tensor::sum(self)
    }
    fn mean(&self) -> Self {
        Tensor::mean(self)
    }
    fn concat_cols(parts: &[&Self]) -> Result<Self> {
        Tensor::concat_cols(parts)
    }
    fn broadcast_rows(&self, rows: usize) -> Result<Self> {
        Tensor::broadcast_rows(self, rows)
    }
}

impl TensorOps for DualTensor {
    fn lift(t: &Tensor) -> Self {
        DualTensor::constant(t)
    }
    fn shape(&self) -> &[usize] {
        DualTensor::shape(self)
    }
    fn add(&self, o: &Self) -> Result<Self> {
        DualTensor::add(self, o)
    }
    fn sub(&self, o: &Self) -> Result<Self> {
        DualTensor::sub(self, o)
    }
    fn mul(&self, o: &Self) -> Result<Self> {
        DualTensor::mul(self, o)
    }
    fn matmul(&self, o: &Self) -> Result<Self> {
        DualTensor::matmul(self, o)
    }
    fn scale(&self, c: f64) -> Self {
        DualTensor::scale(self, c)
    }
    fn silu(&self) -> Self {
        DualTensor::silu(self)
    }
    fn relu(&self) -> Self {
        DualTensor::relu(self)
    }
    fn sin(&self) -> Self {
        DualTensor::sin(self)
    }
    fn cos(&self) -> Self {
        DualTensor::cos(self)
    }
    fn square(&self) -> Self {
        DualTensor::square(self)
    }
    fn sqrt(&self) -> Self {
        DualTensor::sqrt(self)
    }
    fn sum(&self) -> Self {
        DualTensor::sum(self)
    }
    fn mean(&self) -> Self {
        DualTensor::mean(self)
    }
    fn concat_cols(parts: &[&Self]) -> Result<Self> {
        DualTensor::concat_cols(parts)
    }
    fn broadcast_rows(&self, rows: usize) -> Result<Self> {
        DualTensor::broadcast_rows(self, rows)
    }
}
