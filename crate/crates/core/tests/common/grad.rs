//! Finite-difference checks of every layer kernel.
//!
//! Each check draws `cases` random shapes (up to 4x8x8x8), probes the
//! backward pass with a random upstream gradient and returns the largest
//! relative error seen.

use finegrain::nn::{
    batch_norm_backward, batch_norm_train, conv2d_backward, conv2d_forward, gap_backward, gap_forward,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, softmax_ce_backward, softmax_ce_forward, BnState,
};
use finegrain::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{central_diff, max_rel_err, rng, tensor, uniform, weighted_sum};

const STEP: f64 = 1e-5;

fn with_data(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape().to_vec(), data.to_vec()).unwrap()
}

pub fn random_shape(r: &mut impl Rng) -> [usize; 4] {
    [r.gen_range(1..=4), r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=8)]
}

pub fn conv(seed: u64, cases: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let [n, c_in, h, w] = random_shape(&mut r);
        let c_out = r.gen_range(1..=4);
        let k = [1, 3][r.gen_range(0..2)];
        let x = tensor(&mut r, &[n, c_in, h, w], -1.0, 1.0);
        let wt = tensor(&mut r, &[c_out, c_in, k, k], -1.0, 1.0);
        let bias = uniform(&mut r, c_out, -1.0, 1.0);
        let up = tensor(&mut r, &[n, c_out, h, w], -1.0, 1.0);
        let g = conv2d_backward(&x, &wt, &up).unwrap();
        let fx = |d: &[f64]| weighted_sum(conv2d_forward(&with_data(&x, d), &wt, &bias).unwrap().data(), up.data());
        let fw = |d: &[f64]| weighted_sum(conv2d_forward(&x, &with_data(&wt, d), &bias).unwrap().data(), up.data());
        let fb = |d: &[f64]| weighted_sum(conv2d_forward(&x, &wt, d).unwrap().data(), up.data());
        worst = worst
            .max(max_rel_err(g.input.data(), &central_diff(fx, x.data(), STEP)))
            .max(max_rel_err(g.params[0].data(), &central_diff(fw, wt.data(), STEP)))
            .max(max_rel_err(g.params[1].data(), &central_diff(fb, &bias, STEP)));
    }
    worst
}

/// Values at least 0.05 away from zero, so a step never crosses the kink.
fn away_from_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let v: f64 = r.gen_range(0.05..1.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn relu(seed: u64, cases: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let shape = random_shape(&mut r);
        let x = away_from_zero(&mut r, &shape);
        let up = tensor(&mut r, &shape, -1.0, 1.0);
        let g = relu_backward(&x, &up).unwrap();
        let f = |d: &[f64]| weighted_sum(relu_forward(&with_data(&x, d)).data(), up.data());
        worst = worst.max(max_rel_err(g.data(), &central_diff(f, x.data(), STEP)));
    }
    worst
}

pub fn maxpool(seed: u64, cases: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let [n, c, h, w] = random_shape(&mut r);
        let shape = [n, c, 2 * h.div_ceil(2), 2 * w.div_ceil(2)];
        // distinct values on a 0.01 grid: no window has a near tie
        let len: usize = shape.iter().product();
        let mut values: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
        values.shuffle(&mut r);
        let x = Tensor::new(shape.to_vec(), values).unwrap();
        let up = tensor(&mut r, &[n, c, shape[2] / 2, shape[3] / 2], -1.0, 1.0);
        let g = maxpool2_backward(&x, &up).unwrap();
        let f = |d: &[f64]| weighted_sum(maxpool2_forward(&with_data(&x, d)).unwrap().data(), up.data());
        worst = worst.max(max_rel_err(g.data(), &central_diff(f, x.data(), STEP)));
    }
    worst
}

pub fn gap(seed: u64, cases: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let [n, c, h, w] = random_shape(&mut r);
        let x = tensor(&mut r, &[n, c, h, w], -1.0, 1.0);
        let up = tensor(&mut r, &[n, c], -1.0, 1.0);
        let g = gap_backward(&up, h, w).unwrap();
        let f = |d: &[f64]| weighted_sum(gap_forward(&with_data(&x, d)).unwrap().data(), up.data());
        worst = worst.max(max_rel_err(g.data(), &central_diff(f, x.data(), STEP)));
    }
    worst
}

pub fn softmax_ce(seed: u64, cases: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = r.gen_range(1..=6);
        let c = r.gen_range(2..=8);
        let logits = tensor(&mut r, &[n, c], -3.0, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let g = softmax_ce_backward(&logits, &labels).unwrap();
        let f = |d: &[f64]| softmax_ce_forward(&with_data(&logits, d), &labels).unwrap();
        worst = worst.max(max_rel_err(g.data(), &central_diff(f, logits.data(), STEP)));
    }
    worst
}

pub fn random_bn(r: &mut impl Rng, channels: usize) -> BnState {
    let mut s = BnState::new(channels);
    s.gamma = uniform(r, channels, 0.5, 1.5);
    s.beta = uniform(r, channels, -0.5, 0.5);
    s
}

/// Input, gamma and beta gradients through the full train-phase forward,
/// batch statistics included. Shapes with a single value per channel are
/// skipped.
pub fn batch_norm(seed: u64, cases: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < cases {
        let shape = random_shape(&mut r);
        if shape[0] * shape[2] * shape[3] < 2 {
            continue;
        }
        checked += 1;
        let x = tensor(&mut r, &shape, -2.0, 2.0);
        let state = random_bn(&mut r, shape[1]);
        let up = tensor(&mut r, &shape, -1.0, 1.0);
        let (_, cache) = batch_norm_train(&x, &state).unwrap();
        let g = batch_norm_backward(&cache, &state, &up).unwrap();
        let loss = |x: &Tensor, s: &BnState| weighted_sum(batch_norm_train(x, s).unwrap().0.data(), up.data());
        let fx = |d: &[f64]| loss(&with_data(&x, d), &state);
        let fg = |d: &[f64]| loss(&x, &BnState { gamma: d.to_vec(), ..state.clone() });
        let fb = |d: &[f64]| loss(&x, &BnState { beta: d.to_vec(), ..state.clone() });
        worst = worst
            .max(max_rel_err(g.input.data(), &central_diff(fx, x.data(), STEP)))
            .max(max_rel_err(g.params[0].data(), &central_diff(fg, &state.gamma, STEP)))
            .max(max_rel_err(g.params[1].data(), &central_diff(fb, &state.beta, STEP)));
    }
    worst
}
