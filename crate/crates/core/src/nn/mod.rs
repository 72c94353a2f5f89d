//! Layer kernels with explicit forward and backward passes.
//!
//! Every kernel is a pure function. Backward passes take whatever forward
//! inputs they need plus the upstream gradient and return fresh tensors;
//! parameters only change when the caller applies [`sgd_step`].

mod batch_norm;
mod conv;
mod loss;
mod pool;

pub use batch_norm::{
    batch_norm_backward, batch_norm_forward, batch_norm_grad_xhat, batch_norm_infer, batch_norm_train, BnCache, BnOutput, BnState,
    DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward};
pub(crate) use conv::conv2d_backward_impl;
pub use loss::{softmax, softmax_ce_backward, softmax_ce_forward};
pub use pool::{gap_backward, gap_forward, maxpool2_backward, maxpool2_forward};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether a layer runs with batch statistics or with accumulated ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Gradients produced by a parameterized layer's backward pass.
///
/// `params` follows the layer's parameter declaration order:
/// `[weights, bias]` for convolutions and `[gamma, beta]` for batch norm.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: Tensor,
    pub params: Vec<Tensor>,
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Passes `upstream` through where `input > 0`.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    input.check_same_shape(upstream, "relu backward upstream")?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// `params - lr * grads`.
pub fn sgd_step(params: &Tensor, grads: &Tensor, lr: f64) -> Result<Tensor> {
    params.check_same_shape(grads, "sgd gradient")?;
    let mut out = params.clone();
    sgd_update(out.data_mut(), grads.data(), lr)?;
    Ok(out)
}

pub(crate) fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::contract(format!("learning rate must be a finite non-negative value, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::contract(format!(
            "sgd: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}
