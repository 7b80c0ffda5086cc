//! Reference CPU kernels. All of them are pure functions of their inputs and
//! accumulate in `f32`.

use super::Tensor;
use crate::error::{Error, Result};

/// 2-D cross-correlation (no kernel flip) over an NCHW input with OIHW
/// weights and zero padding.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: [usize; 2],
    padding: [usize; 2],
) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("conv2d")?;
    let [o, i, kh, kw] = weights.dims4("conv2d")?;
    if c != i {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {c} != weight input channels {i}"),
        ));
    }
    if bias.len() != o {
        return Err(Error::shape("conv2d", format!("bias length {} != output channels {o}", bias.len())));
    }
    if stride[0] == 0 || stride[1] == 0 {
        return Err(Error::shape("conv2d", "stride must be at least 1"));
    }
    let (ph, pw) = (padding[0], padding[1]);
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * ph, w + 2 * pw),
        ));
    }
    let oh = (h + 2 * ph - kh) / stride[0] + 1;
    let ow = (w + 2 * pw - kw) / stride[1] + 1;

    let k = c * kh * kw;
    let positions = oh * ow;
    let wt = weights.data();
    let mut cols = vec![0.0f32; positions * k];
    let mut out = Vec::with_capacity(n * o * positions);
    for b in 0..n {
        im2col(&input.data()[b * c * h * w..(b + 1) * c * h * w], [c, h, w], [kh, kw], stride, padding, [oh, ow], &mut cols);
        for oc in 0..o {
            let wrow = &wt[oc * k..(oc + 1) * k];
            let bias_v = bias.data()[oc];
            out.extend(cols.chunks_exact(k).map(|col| bias_v + dot(wrow, col)));
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, o, oh, ow], out))
}

#[allow(clippy::too_many_arguments)]
/// Lays out one sample's receptive fields as rows of length `c * kh * kw`,
/// one row per output position, with zeros for padding.
fn im2col(
    x: &[f32],
    [c, h, w]: [usize; 3],
    [kh, kw]: [usize; 2],
    stride: [usize; 2],
    [ph, pw]: [usize; 2],
    [oh, ow]: [usize; 2],
    cols: &mut [f32],
) {
    let k = c * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
            let mut idx = 0;
            for ic in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride[0] + ky) as isize - ph as isize;
                    for kx in 0..kw {
                        let ix = (ox * stride[1] + kx) as isize - pw as isize;
                        row[idx] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            x[(ic * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Fully connected layer: `out[n, o] = bias[o] + sum_f input[n, f] * weights[o, f]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, f] = input.dims2("dense")?;
    let [o, wf] = weights.dims2("dense")?;
    if f != wf {
        return Err(Error::shape("dense", format!("input features {f} != weight features {wf}")));
    }
    if bias.len() != o {
        return Err(Error::shape("dense", format!("bias length {} != output features {o}", bias.len())));
    }
    let x = input.data();
    let wt = weights.data();
    let mut out = Vec::with_capacity(n * o);
    for b in 0..n {
        let row = &x[b * f..(b + 1) * f];
        for oc in 0..o {
            let wrow = &wt[oc * f..(oc + 1) * f];
            out.push(bias.data()[oc] + dot(row, wrow));
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, o], out))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

fn pool_dims(
    op: &'static str,
    input: &Tensor,
    window: [usize; 2],
    stride: [usize; 2],
) -> Result<([usize; 4], usize, usize)> {
    let dims @ [_, _, h, w] = input.dims4(op)?;
    if window[0] == 0 || window[1] == 0 || stride[0] == 0 || stride[1] == 0 {
        return Err(Error::shape(op, "window and stride must be at least 1"));
    }
    if window[0] > h || window[1] > w {
        return Err(Error::shape(
            op,
            format!("window {}x{} larger than input {h}x{w}", window[0], window[1]),
        ));
    }
    Ok((dims, (h - window[0]) / stride[0] + 1, (w - window[1]) / stride[1] + 1))
}

fn pool(
    op: &'static str,
    input: &Tensor,
    window: [usize; 2],
    stride: [usize; 2],
    reduce: impl Fn(&mut dyn Iterator<Item = f32>) -> f32,
) -> Result<Tensor> {
    let ([n, c, h, w], oh, ow) = pool_dims(op, input, window, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let xin = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * stride[0], ox * stride[1]);
                let mut it = (0..window[0])
                    .flat_map(move |ky| (0..window[1]).map(move |kx| (y0 + ky) * w + x0 + kx))
                    .map(|idx| xin[idx]);
                out.push(reduce(&mut it));
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, c, oh, ow], out))
}

pub fn maxpool2d(input: &Tensor, window: [usize; 2], stride: [usize; 2]) -> Result<Tensor> {
    pool("maxpool2d", input, window, stride, |it| it.fold(f32::NEG_INFINITY, f32::max))
}

pub fn avgpool2d(input: &Tensor, window: [usize; 2], stride: [usize; 2]) -> Result<Tensor> {
    let count = (window[0] * window[1]) as f32;
    pool("avgpool2d", input, window, stride, |it| it.sum::<f32>() / count)
}

/// Averages each channel's spatial map down to 1x1.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("global_avg_pool")?;
    let count = (h * w) as f32;
    let out = input.data().chunks_exact(h * w).map(|plane| plane.iter().sum::<f32>() / count).collect();
    Ok(Tensor::from_parts_unchecked(vec![n, c, 1, 1], out))
}

/// Elementwise sum of two identically shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts_unchecked(a.shape().to_vec(), data))
}

/// Collapses every dimension after the first: `N x ...` becomes `N x F`.
pub fn flatten(input: &Tensor) -> Tensor {
    let n = input.shape()[0];
    let f = input.len() / n;
    Tensor::from_parts_unchecked(vec![n, f], input.data().to_vec())
}
