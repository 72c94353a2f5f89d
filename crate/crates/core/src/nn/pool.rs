use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Offset of the window maximum; ties go to the first row-major position.
fn window_argmax(plane: &[f64], w: usize, y: usize, x: usize) -> usize {
    let cands = [y * w + x, y * w + x + 1, (y + 1) * w + x, (y + 1) * w + x + 1];
    let mut best = cands[0];
    for &c in &cands[1..] {
        if plane[c] > plane[best] {
            best = c;
        }
    }
    best
}

fn pool_dims(input: &Tensor) -> Result<[usize; 4]> {
    let [n, c, h, w] = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!("maxpool2 needs even spatial extents, got {h}x{w}")));
    }
    Ok([n, c, h, w])
}

/// 2x2 max pooling with stride 2.
pub fn maxpool2_forward(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = pool_dims(input)?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(plane[window_argmax(plane, w, 2 * oy, 2 * ox)]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Routes each upstream value to its window's argmax.
pub fn maxpool2_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = pool_dims(input)?;
    let (oh, ow) = (h / 2, w / 2);
    if upstream.shape() != [n, c, oh, ow] {
        return Err(Error::contract(format!(
            "maxpool2 backward: upstream shape {:?}, expected {:?}",
            upstream.shape(),
            [n, c, oh, ow]
        )));
    }
    let mut grad = vec![0.0; input.len()];
    for ((plane, g_plane), up) in input
        .data()
        .chunks_exact(h * w)
        .zip(grad.chunks_exact_mut(h * w))
        .zip(upstream.data().chunks_exact(oh * ow))
    {
        for oy in 0..oh {
            for ox in 0..ow {
                g_plane[window_argmax(plane, w, 2 * oy, 2 * ox)] += up[oy * ow + ox];
            }
        }
    }
    Tensor::new(input.shape().to_vec(), grad)
}

/// Global average pooling: `[n, c, h, w] -> [n, c]`.
pub fn gap_forward(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::contract("gap over an empty map"));
    }
    let count = (h * w) as f64;
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / count)
        .collect();
    Tensor::new(vec![n, c], out)
}

/// Spreads each upstream value `g` as `g / (h * w)` over its whole map.
///
/// Every location of a map receives the same bits.
pub fn gap_backward(upstream: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, c] = upstream.dims2()?;
    if h == 0 || w == 0 {
        return Err(Error::contract("gap backward over an empty map"));
    }
    let count = (h * w) as f64;
    let mut grad = Vec::with_capacity(n * c * h * w);
    for &g in upstream.data() {
        let share = g / count;
        grad.extend(std::iter::repeat(share).take(h * w));
    }
    Tensor::new(vec![n, c, h, w], grad)
}
