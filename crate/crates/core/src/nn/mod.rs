//! Differentiable kernels for the segmentation network.
//!
//! Every operation comes as a forward function plus an explicit backward
//! function. Backward functions return the gradient with respect to the
//! operation's input and *accumulate* parameter gradients into the
//! [`Param::grad`] buffers of the parameters they touch.
//!
//! All kernels are generic over [`Float`] so that training can run in `f32`
//! while gradient checks and oracles run in `f64`.

mod activation;
mod adam;
mod conv;
mod gradcheck;
mod loss;
mod norm;
mod pool;
mod upsample;

pub use activation::{
    dropout, dropout_backward, relu, relu_backward, softmax_channels, softmax_channels_backward,
};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d, conv2d_backward, ConvParams, Padding};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use loss::{
    masked_cross_entropy, masked_cross_entropy_backward, softmax_cross_entropy, LossOutput,
};
pub use norm::{batch_norm, batch_norm_backward, BatchNormCache, BatchNormState};
pub use pool::{
    broadcast_backward, broadcast_spatial, global_avg_pool, global_avg_pool_backward, max_pool,
    max_pool_backward,
};
pub use upsample::{bilinear_upsample, bilinear_upsample_backward};

use ndarray::{Array4, ArrayD, IxDyn, NdFloat};
use num_traits::FromPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scalar type the kernels are generic over (`f32` or `f64`).
pub trait Float: NdFloat + FromPrimitive + Default + std::iter::Sum + 'static {
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }
}

impl Float for f32 {}
impl Float for f64 {}

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate batch: batch norm needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("mask selects no pixels; the masked mean is undefined")]
    EmptyMask,
}

/// Train/infer switch for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

/// Rank-4 activation tensor laid out as (batch, channel, height, width),
/// with optional gradient storage of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<F> {
    values: Array4<F>,
    grad: Option<Array4<F>>,
}

impl<F: Float> Tensor4<F> {
    pub fn new(values: Array4<F>) -> Result<Self, NnError> {
        if values.shape().iter().any(|&d| d == 0) {
            return Err(NnError::Shape(format!(
                "tensor dims must be positive, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values, grad: None })
    }

    pub fn zeros(dims: (usize, usize, usize, usize)) -> Self {
        Self::new(Array4::zeros(dims)).expect("positive dims")
    }

    pub(crate) fn wrap(values: Array4<F>) -> Self {
        Self { values, grad: None }
    }

    /// (N, C, H, W)
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array4<F> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array4<F> {
        &mut self.values
    }

    pub fn into_values(self) -> Array4<F> {
        self.values
    }

    pub fn grad(&self) -> Option<&Array4<F>> {
        self.grad.as_ref()
    }

    pub fn set_grad(&mut self, grad: Array4<F>) -> Result<(), NnError> {
        if grad.dim() != self.values.dim() {
            return Err(NnError::Shape(format!(
                "gradient {:?} does not match values {:?}",
                grad.shape(),
                self.values.shape()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Array4<F>> {
        self.grad.take()
    }
}

/// A trainable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Float> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}
