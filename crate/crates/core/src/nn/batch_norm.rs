//! Per-channel batch normalization over `[n, c, h, w]` activations.
//!
//! For each channel the set of activations `B = {x_1, ..., x_m}` gathers
//! every spatial location of every image in the batch, so `m = n * h * w`.
//! The training forward pass computes
//!
//! ```text
//! mu     = (1/m) * sum_i x_i
//! var    = (1/m) * sum_i (x_i - mu)^2
//! xhat_i = (x_i - mu) / sqrt(var + eps)
//! y_i    = gamma * xhat_i + beta
//! ```
//!
//! and the backward pass propagates `dl/dy` through these four lines term by
//! term (see [`batch_norm_backward`]).
//!
//! Running statistics for inference are exponential moving averages of the
//! batch mean and the biased batch variance.

use super::{LayerGrads, Phase};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Learned affine parameters and accumulated inference statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight of the newest batch in the running averages, in `(0, 1]`.
    pub momentum: f64,
    /// Number of training batches folded into the running statistics.
    pub batches_seen: u64,
}

impl BnState {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: DEFAULT_BN_EPS,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_BN_MOMENTUM,
            batches_seen: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.batches_seen > 0
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::contract("batch-norm state vectors differ in length"));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::contract("negative running variance"));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::contract(format!("momentum {} outside (0, 1]", self.momentum)));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::contract(format!("negative epsilon {}", self.eps)));
        }
        Ok(())
    }

    /// Folds the statistics of one training batch into the running averages.
    pub fn absorb_batch(&mut self, cache: &BnCache) {
        let mom = self.momentum;
        for ch in 0..self.channels() {
            self.running_mean[ch] = (1.0 - mom) * self.running_mean[ch] + mom * cache.mean[ch];
            self.running_var[ch] = (1.0 - mom) * self.running_var[ch] + mom * cache.var[ch];
        }
        self.batches_seen += 1;
    }
}

/// Intermediate values of a training forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    /// `x_i - mu`, same shape as the input.
    pub centered: Tensor,
    pub x_hat: Tensor,
    pub mean: Vec<f64>,
    /// Biased (`1/m`) batch variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnOutput {
    pub output: Tensor,
    /// Present for [`Phase::Train`] only.
    pub cache: Option<BnCache>,
}

fn dims(input: &Tensor, state: &BnState) -> Result<[usize; 4]> {
    let d = input.dims4()?;
    if d[1] != state.channels() {
        return Err(Error::contract(format!(
            "batch norm over {} channels given {} channels",
            state.channels(),
            d[1]
        )));
    }
    Ok(d)
}

/// Runs either phase; the caller applies [`BnState::absorb_batch`] after training steps.
pub fn batch_norm_forward(input: &Tensor, state: &BnState, phase: Phase) -> Result<BnOutput> {
    match phase {
        Phase::Train => {
            let (output, cache) = batch_norm_train(input, state)?;
            Ok(BnOutput {
                output,
                cache: Some(cache),
            })
        }
        Phase::Infer => Ok(BnOutput {
            output: batch_norm_infer(input, state)?,
            cache: None,
        }),
    }
}

/// Normalizes with the statistics of this batch.
pub fn batch_norm_train(input: &Tensor, state: &BnState) -> Result<(Tensor, BnCache)> {
    let [n, c, h, w] = dims(input, state)?;
    let plane = h * w;
    let m = n * plane;
    if m == 0 {
        return Err(Error::contract("batch norm over an empty batch"));
    }
    let x = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..n {
            sum += x[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
        mean[ch] = sum / m as f64;
        let mut sq = 0.0;
        for b in 0..n {
            sq += x[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
        var[ch] = sq / m as f64;
    }

    let mut centered = vec![0.0; x.len()];
    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let inv_std = 1.0 / (var[ch] + state.eps).sqrt();
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                centered[i] = x[i] - mean[ch];
                x_hat[i] = centered[i] * inv_std;
                y[i] = state.gamma[ch] * x_hat[i] + state.beta[ch];
            }
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BnCache {
            centered: Tensor::new(shape.clone(), centered)?,
            x_hat: Tensor::new(shape, x_hat)?,
            mean,
            var,
        },
    ))
}

/// Normalizes with the running statistics.
pub fn batch_norm_infer(input: &Tensor, state: &BnState) -> Result<Tensor> {
    let [n, c, h, w] = dims(input, state)?;
    if !state.is_initialized() {
        return Err(Error::UninitializedStats);
    }
    let plane = h * w;
    let mut y = input.clone();
    let data = y.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let inv_std = 1.0 / (state.running_var[ch] + state.eps).sqrt();
            let off = (b * c + ch) * plane;
            for v in &mut data[off..off + plane] {
                *v = state.gamma[ch] * ((*v - state.running_mean[ch]) * inv_std) + state.beta[ch];
            }
        }
    }
    Ok(y)
}

/// Gradients of the training forward pass.
///
/// Per channel, with `s = var + eps`:
///
/// ```text
/// dl/dxhat_i = dl/dy_i * gamma
/// dl/dvar    = sum_i dl/dxhat_i * (x_i - mu) * (-1/2) * s^(-3/2)
/// dl/dmu     = sum_i dl/dxhat_i * (-1 / sqrt(s)) + dl/dvar * (sum_i -2 (x_i - mu)) / m
/// dl/dx_i    = dl/dxhat_i / sqrt(s) + dl/dvar * 2 (x_i - mu) / m + dl/dmu / m
/// dl/dgamma  = sum_i dl/dy_i * xhat_i
/// dl/dbeta   = sum_i dl/dy_i
/// ```
///
/// Returned `params` are `[dl/dgamma, dl/dbeta]`, each of shape `[c]`.
pub fn batch_norm_backward(cache: &BnCache, state: &BnState, upstream: &Tensor) -> Result<LayerGrads> {
    cache.x_hat.check_same_shape(upstream, "batch norm backward upstream")?;
    let [n, c, h, w] = dims(upstream, state)?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let dy = upstream.data();
    let xc = cache.centered.data();
    let xh = cache.x_hat.data();

    let mut dx = vec![0.0; dy.len()];
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    let mut d_xhat = vec![0.0; dy.len()];

    for ch in 0..c {
        let s = cache.var[ch] + state.eps;
        let inv_sqrt = 1.0 / s.sqrt();
        let offsets = || (0..n).map(move |b| (b * c + ch) * plane);

        let mut d_var = 0.0;
        let mut sum_d_xhat = 0.0;
        let mut sum_centered = 0.0;
        for off in offsets() {
            for i in off..off + plane {
                d_xhat[i] = dy[i] * state.gamma[ch];
                d_var += d_xhat[i] * xc[i] * -0.5 * s.powf(-1.5);
                sum_d_xhat += d_xhat[i];
                sum_centered += -2.0 * xc[i];
                d_gamma[ch] += dy[i] * xh[i];
                d_beta[ch] += dy[i];
            }
        }
        let d_mu = sum_d_xhat * -inv_sqrt + d_var * sum_centered / m;
        for off in offsets() {
            for i in off..off + plane {
                dx[i] = d_xhat[i] * inv_sqrt + d_var * 2.0 * xc[i] / m + d_mu / m;
            }
        }
    }

    Ok(LayerGrads {
        input: Tensor::new(upstream.shape().to_vec(), dx)?,
        params: vec![Tensor::vector(d_gamma), Tensor::vector(d_beta)],
    })
}

/// `dl/dxhat = dl/dy * gamma`, the first step of [`batch_norm_backward`].
pub fn batch_norm_grad_xhat(state: &BnState, upstream: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims(upstream, state)?;
    let plane = h * w;
    let mut out = upstream.clone();
    for b in 0..n {
        for ch in 0..c {
            for v in &mut out.data_mut()[(b * c + ch) * plane..][..plane] {
                *v *= state.gamma[ch];
            }
        }
    }
    Ok(out)
}
