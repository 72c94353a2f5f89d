use std::ops::Range;

use super::LayerGrads;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
}

fn check(input: &Tensor, weights: &Tensor, bias_len: usize) -> Result<ConvDims> {
    let [n, c_in, h, w] = input.dims4()?;
    let [c_out, wc_in, k, k2] = weights.dims4()?;
    if wc_in != c_in {
        return Err(Error::contract(format!(
            "conv2d: input has {c_in} channels but kernels expect {wc_in}"
        )));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::contract(format!("conv2d: kernel must be square and odd, got {k}x{k2}")));
    }
    if bias_len != c_out {
        return Err(Error::contract(format!("conv2d: {bias_len} biases for {c_out} output channels")));
    }
    Ok(ConvDims { n, c_in, h, w, c_out, k })
}

/// Output rows/cols that read a valid input position for kernel offset `d`.
fn valid(extent: usize, d: isize) -> Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (extent as isize - d).min(extent as isize).max(0) as usize;
    lo..hi.max(lo)
}

/// Same-padded, stride-1 2-D convolution (cross-correlation).
///
/// `input` is `[n, c_in, h, w]`, `weights` is `[c_out, c_in, k, k]` with `k`
/// odd, and `bias` has one entry per output channel. Output is
/// `[n, c_out, h, w]`.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let d = check(input, weights, bias.len())?;
    let plane = d.h * d.w;
    let pad = (d.k / 2) as isize;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; d.n * d.c_out * plane];

    for b in 0..d.n {
        for o in 0..d.c_out {
            let out_plane = &mut out[(b * d.c_out + o) * plane..][..plane];
            out_plane.fill(bias[o]);
            for c in 0..d.c_in {
                let in_plane = &x[(b * d.c_in + c) * plane..][..plane];
                let kernel = &wt[(o * d.c_in + c) * d.k * d.k..][..d.k * d.k];
                for ky in 0..d.k {
                    let dy = ky as isize - pad;
                    let rows = valid(d.h, dy);
                    for kx in 0..d.k {
                        let dx = kx as isize - pad;
                        let cols = valid(d.w, dx);
                        let wv = kernel[ky * d.k + kx];
                        for oy in rows.clone() {
                            let iy = (oy as isize + dy) as usize;
                            let ix0 = (cols.start as isize + dx) as usize;
                            let dst = &mut out_plane[oy * d.w + cols.start..oy * d.w + cols.end];
                            let src = &in_plane[iy * d.w + ix0..][..dst.len()];
                            for (o, &i) in dst.iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.c_out, d.h, d.w], out)
}

/// Gradients of [`conv2d_forward`] with respect to its input, weights and bias.
pub fn conv2d_backward(input: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<LayerGrads> {
    let c_out = weights.shape().first().copied().unwrap_or(0);
    let (grad_in, grad_w, grad_b) = conv2d_backward_impl(input, weights, upstream, c_out, true)?;
    Ok(LayerGrads {
        input: grad_in.expect("input gradient requested"),
        params: vec![grad_w, grad_b],
    })
}

/// Backward pass that can skip the input gradient (first layer of a network).
pub(crate) fn conv2d_backward_impl(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
    bias_len: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let d = check(input, weights, bias_len)?;
    if upstream.shape() != [d.n, d.c_out, d.h, d.w] {
        return Err(Error::contract(format!(
            "conv2d backward: upstream shape {:?}, expected {:?}",
            upstream.shape(),
            [d.n, d.c_out, d.h, d.w]
        )));
    }
    let plane = d.h * d.w;
    let pad = (d.k / 2) as isize;
    let x = input.data();
    let wt = weights.data();
    let g = upstream.data();
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = vec![0.0; d.c_out];
    let mut grad_in = if need_input_grad {
        vec![0.0; input.len()]
    } else {
        Vec::new()
    };

    for b in 0..d.n {
        for o in 0..d.c_out {
            let g_plane = &g[(b * d.c_out + o) * plane..][..plane];
            grad_b[o] += g_plane.iter().sum::<f64>();
            for c in 0..d.c_in {
                let in_off = (b * d.c_in + c) * plane;
                let in_plane = &x[in_off..][..plane];
                let k_off = (o * d.c_in + c) * d.k * d.k;
                for ky in 0..d.k {
                    let dy = ky as isize - pad;
                    let rows = valid(d.h, dy);
                    for kx in 0..d.k {
                        let dx = kx as isize - pad;
                        let cols = valid(d.w, dx);
                        let wv = wt[k_off + ky * d.k + kx];
                        let mut acc = 0.0;
                        for oy in rows.clone() {
                            let iy = (oy as isize + dy) as usize;
                            let ix0 = (cols.start as isize + dx) as usize;
                            let gr = &g_plane[oy * d.w + cols.start..oy * d.w + cols.end];
                            let src = &in_plane[iy * d.w + ix0..][..gr.len()];
                            acc += gr.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            if need_input_grad {
                                let dst = &mut grad_in[in_off + iy * d.w + ix0..][..gr.len()];
                                for (di, &gv) in dst.iter_mut().zip(gr) {
                                    *di += wv * gv;
                                }
                            }
                        }
                        grad_w[k_off + ky * d.k + kx] += acc;
                    }
                }
            }
        }
    }

    let grad_in = if need_input_grad {
        Some(Tensor::new(input.shape().to_vec(), grad_in)?)
    } else {
        None
    };
    Ok((
        grad_in,
        Tensor::new(weights.shape().to_vec(), grad_w)?,
        Tensor::vector(grad_b),
    ))
}
