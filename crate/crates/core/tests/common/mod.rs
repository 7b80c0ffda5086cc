#![allow(dead_code)]

//! Scalar-loop oracles shared by the integration tests. Everything here is
//! written independently of the library kernels and accumulates in `f64`.

use qlwa::rng::Rng;
use qlwa::{NetworkGraph, Tensor};

pub fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(lo, hi) as f32).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `|a - b| / max(|b|, 1)`, worst element.
pub fn max_rel_err(actual: &[f32], expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    actual
        .iter()
        .zip(expected)
        .map(|(&a, &e)| (f64::from(a) - e).abs() / e.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: [usize; 2], pad: [usize; 2]) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad[0] - kh) / stride[0] + 1;
    let ow = (wd + 2 * pad[1] - kw) / stride[1] + 1;
    let xv = |bn: usize, ch: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            f64::from(x.data()[((bn * c + ch) * h + y as usize) * wd + xx as usize])
        }
    };
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for bn in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = f64::from(b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride[0] + ky) as isize - pad[0] as isize;
                                let xx = (ox * stride[1] + kx) as isize - pad[1] as isize;
                                let wv = f64::from(w.data()[((oc * c + ic) * kh + ky) * kw + kx]);
                                acc += wv * xv(bn, ic, y, xx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut out = Vec::with_capacity(n * o);
    for i in 0..n {
        for j in 0..o {
            let mut acc = f64::from(b.data()[j]);
            for k in 0..f {
                acc += f64::from(x.data()[i * f + k]) * f64::from(w.data()[j * f + k]);
            }
            out.push(acc);
        }
    }
    (vec![n, o], out)
}

fn pool(x: &Tensor, win: [usize; 2], stride: [usize; 2], max: bool) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h - win[0]) / stride[0] + 1;
    let ow = (w - win[1]) / stride[1] + 1;
    let mut out = Vec::new();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = Vec::new();
                for ky in 0..win[0] {
                    for kx in 0..win[1] {
                        vals.push(f64::from(x.data()[p * h * w + (oy * stride[0] + ky) * w + ox * stride[1] + kx]));
                    }
                }
                out.push(if max {
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                });
            }
        }
    }
    (vec![n, c, oh, ow], out)
}

pub fn maxpool(x: &Tensor, win: [usize; 2], stride: [usize; 2]) -> (Vec<usize>, Vec<f64>) {
    pool(x, win, stride, true)
}

pub fn avgpool(x: &Tensor, win: [usize; 2], stride: [usize; 2]) -> (Vec<usize>, Vec<f64>) {
    pool(x, win, stride, false)
}

pub fn global_avg_pool(x: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let out = (0..n * c)
        .map(|p| x.data()[p * h * w..(p + 1) * h * w].iter().map(|&v| f64::from(v)).sum::<f64>() / (h * w) as f64)
        .collect();
    (vec![n, c, 1, 1], out)
}

/// Affine fake quantization from first principles: the range is widened to
/// hold zero, the zero point is an integer and codes round half away from
/// zero. Ranges too narrow for a normal `f32` scale are degenerate.
pub struct RefQuant {
    pub scale: f64,
    pub zero_point: f64,
    pub qmax: f64,
}

impl RefQuant {
    pub fn new(lo: f32, hi: f32, bits: u32) -> Self {
        let qmax = f64::from((1u32 << bits) - 1);
        let lo = f64::from(lo.min(0.0));
        let hi = f64::from(hi.max(0.0));
        if hi <= lo {
            return RefQuant { scale: 1.0, zero_point: 0.0, qmax };
        }
        let scale = ((hi - lo) / qmax) as f32;
        if !scale.is_normal() {
            return RefQuant { scale: 1.0, zero_point: 0.0, qmax };
        }
        let scale = f64::from(scale);
        let zero_point = (-lo / scale).round().clamp(0.0, qmax);
        RefQuant { scale, zero_point, qmax }
    }

    pub fn apply(&self, x: f32) -> f32 {
        let code = (f64::from(x) / self.scale + self.zero_point).round().clamp(0.0, self.qmax);
        ((code - self.zero_point) * self.scale) as f32
    }
}

pub fn minmax(values: &[f32]) -> (f32, f32) {
    values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Per-channel mean of `fp - q` where `q` uses RefQuant'd weights and the
/// corrected bias, both fed the full-precision layer input.
pub fn preact_shift(original: &NetworkGraph, corrected: &NetworkGraph, id: &str, bits: u32, inputs: &[Tensor]) -> Vec<f64> {
    let (w, b) = original.layer_params(id).unwrap();
    let (_, cb) = corrected.layer_params(id).unwrap();
    let (lo, hi) = minmax(w.data());
    let rq = RefQuant::new(lo, hi, bits);
    let wq = Tensor::new(w.shape().to_vec(), w.data().iter().map(|&v| rq.apply(v)).collect()).unwrap();
    let channels = w.shape()[0];
    let mut sums = vec![0.0; channels];
    let mut count = 0;
    for x in inputs {
        let (fp, q) = if w.shape().len() == 4 {
            let pad = [w.shape()[2] / 2, w.shape()[3] / 2];
            (conv2d(x, w, b, [1, 1], pad).1, conv2d(x, &wq, cb, [1, 1], pad).1)
        } else {
            (dense(x, w, b).1, dense(x, &wq, cb).1)
        };
        let inner = fp.len() / channels;
        for (i, (a, b)) in fp.chunks(inner).zip(q.chunks(inner)).enumerate() {
            sums[i % channels] += a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>();
        }
        count += inner;
    }
    sums.iter().map(|s| s / count as f64).collect()
}
