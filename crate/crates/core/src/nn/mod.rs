//! A small set of differentiable operators with hand-written backward
//! passes: 1D (transposed) convolution, GRU, instance normalization,
//! activations, elementwise losses and Adam.
//!
//! Layers do not record a graph. Callers keep the forward inputs (and any
//! layer cache) and hand them back to `backward`, which accumulates parameter
//! gradients and returns the input gradient.

mod act;
mod adam;
mod conv;
pub mod gradcheck;
mod gru;
mod loss;
mod norm;
mod tensor;

pub use act::{leaky_relu, leaky_relu_backward, tanh, tanh_backward, tanh_scalar, LEAKY_SLOPE};
pub use adam::{adam_update, AdamConfig, AdamState};
pub use conv::{Conv1d, ConvTranspose1d, Padding};
pub use gradcheck::finite_diff_check;
pub use gru::{Gru, GruCache};
pub use loss::{l1_loss, squared_error_loss};
pub use norm::{InstanceNorm, INSTANCE_NORM_EPS};
pub use tensor::{gemm, Real, Tensor};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("bad layer configuration: {0}")]
    BadConfig(String),
}

/// A named trainable tensor and its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
}

impl<R: Real> Param<R> {
    pub fn new(name: impl Into<String>, value: Tensor<R>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| R::lit(rng.gen_range(-bound..=bound)))
            .collect();
        Self::new(name, Tensor::from_vec(shape, data).expect("length matches shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(R::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// He-uniform bound for a layer with the given fan-in.
pub fn he_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

/// Which gradients a backward pass should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradMode {
    /// Return the gradient with respect to the layer input.
    pub input: bool,
    /// Accumulate gradients into the layer's parameters.
    pub params: bool,
}

impl GradMode {
    pub const ALL: GradMode = GradMode {
        input: true,
        params: true,
    };
    pub const INPUT_ONLY: GradMode = GradMode {
        input: true,
        params: false,
    };
    pub const PARAMS_ONLY: GradMode = GradMode {
        input: false,
        params: true,
    };
}
