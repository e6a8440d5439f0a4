//! Numerical substrate: tensors, layers with exact backward passes, Adam and
//! a finite-difference gradient checker.

mod adam;
pub mod attention;
pub mod gradcheck;
pub mod layers;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use attention::{MultiHeadAttention, TransformerBlock};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{cross_entropy, linear_backward, linear_forward, log_softmax, softmax, LayerNorm, Linear};
pub use tensor::{gemm, Scalar, Tensor};

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S: Scalar = f32> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

pub fn zero_grads<S: Scalar>(params: &mut [&mut Parameter<S>]) {
    params.iter_mut().for_each(|p| p.zero_grad());
}

pub fn flatten_values<S: Scalar>(params: &[&Parameter<S>]) -> Vec<S> {
    params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
}

pub fn flatten_grads<S: Scalar>(params: &[&Parameter<S>]) -> Vec<S> {
    params.iter().flat_map(|p| p.grad.data().iter().copied()).collect()
}

/// Overwrites parameter values from a flat vector in parameter order.
pub fn assign_flat<S: Scalar>(params: &mut [&mut Parameter<S>], flat: &[S]) {
    let total: usize = params.iter().map(|p| p.value.len()).sum();
    assert_eq!(total, flat.len(), "flat vector length");
    let mut at = 0;
    for p in params.iter_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

pub fn scale_grads<S: Scalar>(params: &mut [&mut Parameter<S>], factor: S) {
    params.iter_mut().for_each(|p| p.grad.scale(factor));
}
