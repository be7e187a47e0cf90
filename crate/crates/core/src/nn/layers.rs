//! Layer primitives. Every forward has a matching backward that returns the
//! exact gradient of the forward with respect to its inputs and parameters.
//!
//! Activations are NCHW, row-major. Batch loops run on the rayon pool; each
//! sample writes a disjoint slice and parameter gradients are reduced in
//! sample order, so results do not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RandomStream;

use super::{matmul, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec { cin, cout, kernel, stride, pad: kernel / 2 }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.kernel, self.kernel]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.kernel, self.stride, self.pad),
            conv_out_size(w, self.kernel, self.stride, self.pad),
        )
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

fn im2col<T: Real>(x: &[T], spec: &ConvSpec, h: usize, w: usize, col: &mut [T]) {
    let (ho, wo) = spec.out_hw(h, w);
    let k = spec.kernel;
    for c in 0..spec.cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let out = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                    let dst = &mut out[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * h + ii as usize) * w..(c * h + ii as usize + 1) * w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                        *d = if jj < 0 || jj >= w as isize { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], spec: &ConvSpec, h: usize, w: usize, dx: &mut [T]) {
    let (ho, wo) = spec.out_hw(h, w);
    let k = spec.kernel;
    for c in 0..spec.cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * h + ii as usize) * w..(c * h + ii as usize + 1) * w];
                    for oj in 0..wo {
                        let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_input<T: Real>(x: &Tensor<T>, spec: &ConvSpec, weight: &[T]) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if c != spec.cin {
        return Err(Error::Shape(format!("conv expects {} input channels, got {c}", spec.cin)));
    }
    if weight.len() != spec.cout * spec.col_rows() {
        return Err(Error::Shape("conv weight size does not match its spec".into()));
    }
    if h + 2 * spec.pad < spec.kernel || w + 2 * spec.pad < spec.kernel {
        return Err(Error::Shape(format!("input {h}x{w} smaller than kernel")));
    }
    Ok((n, h, w))
}

/// Bias-free 2-d convolution.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, weight: &[T], spec: &ConvSpec) -> Result<Tensor<T>> {
    let (n, h, w) = check_conv_input(x, spec, weight)?;
    let (ho, wo) = spec.out_hw(h, w);
    let in_len = spec.cin * h * w;
    let out_len = spec.cout * ho * wo;
    let mut y = vec![T::zero(); n * out_len];
    y.par_chunks_mut(out_len.max(1)).enumerate().for_each(|(s, ys)| {
        let mut col = vec![T::zero(); spec.col_rows() * ho * wo];
        im2col(&x.data[s * in_len..(s + 1) * in_len], spec, h, w, &mut col);
        matmul(spec.cout, spec.col_rows(), ho * wo, weight, false, &col, false, ys, false);
    });
    Tensor::from_vec(&[n, spec.cout, ho, wo], y)
}

/// Returns `(d_input, d_weight)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    spec: &ConvSpec,
    dy: &[T],
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, h, w) = check_conv_input(x, spec, weight)?;
    let (ho, wo) = spec.out_hw(h, w);
    let in_len = spec.cin * h * w;
    let out_len = spec.cout * ho * wo;
    if dy.len() != n * out_len {
        return Err(Error::Shape("conv upstream gradient has the wrong size".into()));
    }
    let rows = spec.col_rows();
    let mut dx = vec![T::zero(); n * in_len];
    let per_sample: Vec<Vec<T>> = dx
        .par_chunks_mut(in_len.max(1))
        .enumerate()
        .map(|(s, dxs)| {
            let dys = &dy[s * out_len..(s + 1) * out_len];
            let mut col = vec![T::zero(); rows * ho * wo];
            im2col(&x.data[s * in_len..(s + 1) * in_len], spec, h, w, &mut col);
            let mut dw = vec![T::zero(); spec.cout * rows];
            // dW = dY [cout, hw] * col^T [hw, rows]
            matmul(spec.cout, ho * wo, rows, dys, false, &col, true, &mut dw, false);
            // dcol = W^T [rows, cout] * dY [cout, hw]
            matmul(rows, spec.cout, ho * wo, weight, true, dys, false, &mut col, false);
            col2im(&col, spec, h, w, dxs);
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); spec.cout * rows];
    for g in &per_sample {
        for (a, b) in dw.iter_mut().zip(g) {
            *a += *b;
        }
    }
    Ok((Tensor::from_vec(&x.shape, dx)?, dw))
}

/// Saved state of a train-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub batch_var: Vec<f64>,
}

fn check_bn<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!("batch norm over {c} channels given {} scales", gamma.len())));
    }
    Ok((n, c, h * w))
}

pub fn batchnorm_forward_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, hw) = check_bn(x, gamma, beta)?;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            s += x.data[base..base + hw].iter().map(|v| v.f64()).sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            ss += x.data[base..base + hw].iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = ss / count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (m, is) = (mean[ch], inv_std[ch]);
            let (g, bt) = (gamma[ch], beta[ch]);
            for i in base..base + hw {
                let xh = T::of((x.data[i].f64() - m) * is);
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    let unbiased = if count > 1.0 {
        var.iter().map(|v| v * count / (count - 1.0)).collect()
    } else {
        var.clone()
    };
    Ok((
        Tensor::from_vec(&x.shape, y)?,
        BnCache { xhat, inv_std, batch_mean: mean, batch_var: unbiased },
    ))
}

pub fn batchnorm_forward_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Result<Tensor<T>> {
    let (n, c, hw) = check_bn(x, gamma, beta)?;
    let mut y = vec![T::zero(); x.numel()];
    for ch in 0..c {
        let is = 1.0 / (running_var[ch].f64() + BN_EPS).sqrt();
        let scale = T::of(gamma[ch].f64() * is);
        let shift = T::of(beta[ch].f64() - gamma[ch].f64() * is * running_mean[ch].f64());
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                y[i] = x.data[i] * scale + shift;
            }
        }
    }
    Tensor::from_vec(&x.shape, y)
}

/// Returns `(d_input, d_gamma, d_beta)` of the train-mode forward.
pub fn batchnorm_backward<T: Real>(
    dy: &[T],
    gamma: &[T],
    cache: &BnCache<T>,
    shape: &[usize],
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, c, hw) = match shape {
        [n, c, h, w] => (*n, *c, h * w),
        _ => return Err(Error::Shape("batch norm expects 4-d input".into())),
    };
    if dy.len() != cache.xhat.len() {
        return Err(Error::Shape("batch norm upstream gradient has the wrong size".into()));
    }
    let count = (n * hw) as f64;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (0.0, 0.0);
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                sdy += dy[i].f64();
                sdyx += dy[i].f64() * cache.xhat[i].f64();
            }
        }
        dgamma[ch] = T::of(sdyx);
        dbeta[ch] = T::of(sdy);
        let k = gamma[ch].f64() * cache.inv_std[ch] / count;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dx[i] = T::of(k * (count * dy[i].f64() - sdy - cache.xhat[i].f64() * sdyx));
            }
        }
    }
    Ok((Tensor::from_vec(shape, dx)?, dgamma, dbeta))
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        grad: None,
    }
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &[T]) -> Vec<T> {
    y.data
        .iter()
        .zip(dy)
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect()
}

/// Inverted dropout mask: entries are 0 or `1/(1-p)`.
pub fn dropout_mask<T: Real>(len: usize, p: f64, rng: &mut RandomStream) -> Vec<T> {
    if p <= 0.0 {
        return vec![T::one(); len];
    }
    let keep = T::of(1.0 / (1.0 - p));
    (0..len).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect()
}

pub fn apply_mask<T: Real>(x: &[T], mask: &[T]) -> Vec<T> {
    x.iter().zip(mask).map(|(&a, &m)| a * m).collect()
}

/// `y[n, out] = x[n, in] * W^T + b` with `W` stored `[out, in]`.
pub fn linear_forward<T: Real>(
    x: &[T],
    rows: usize,
    weight: &[T],
    bias: Option<&[T]>,
    in_dim: usize,
    out_dim: usize,
) -> Result<Vec<T>> {
    if x.len() != rows * in_dim || weight.len() != in_dim * out_dim {
        return Err(Error::Shape(format!(
            "linear {in_dim}->{out_dim} given {} inputs over {rows} rows",
            x.len()
        )));
    }
    let mut y = vec![T::zero(); rows * out_dim];
    if let Some(b) = bias {
        for r in 0..rows {
            y[r * out_dim..(r + 1) * out_dim].copy_from_slice(b);
        }
    }
    matmul(rows, in_dim, out_dim, x, false, weight, true, &mut y, bias.is_some());
    Ok(y)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn linear_backward<T: Real>(
    x: &[T],
    rows: usize,
    weight: &[T],
    in_dim: usize,
    out_dim: usize,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); rows * in_dim];
    matmul(rows, out_dim, in_dim, dy, false, weight, false, &mut dx, false);
    let mut dw = vec![T::zero(); out_dim * in_dim];
    matmul(out_dim, rows, in_dim, dy, true, x, false, &mut dw, false);
    let mut db = vec![T::zero(); out_dim];
    for r in 0..rows {
        for (a, &g) in db.iter_mut().zip(&dy[r * out_dim..(r + 1) * out_dim]) {
            *a += g;
        }
    }
    (dx, dw, db)
}

/// Global statistics pooling: per-channel mean and population standard
/// deviation over the spatial extent, concatenated as `[mu_1..mu_C, sigma_1..sigma_C]`.
#[derive(Debug, Clone)]
pub struct GspCache {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn gsp_forward<T: Real>(x: &Tensor<T>) -> Result<(Vec<T>, GspCache)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Shape("global statistics pooling over an empty feature map".into()));
    }
    let mut out = vec![T::zero(); n * 2 * c];
    let mut mean = vec![0.0; n * c];
    let mut std = vec![0.0; n * c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let v = &x.data[base..base + hw];
            let m = v.iter().map(|t| t.f64()).sum::<f64>() / hw as f64;
            let var = v.iter().map(|t| (t.f64() - m).powi(2)).sum::<f64>() / hw as f64;
            let s = var.sqrt();
            mean[b * c + ch] = m;
            std[b * c + ch] = s;
            out[b * 2 * c + ch] = T::of(m);
            out[b * 2 * c + c + ch] = T::of(s);
        }
    }
    Ok((out, GspCache { mean, std }))
}

/// Exact gradient of [`gsp_forward`]; where a channel's deviation is zero the
/// deviation branch contributes nothing.
pub fn gsp_backward<T: Real>(x: &Tensor<T>, cache: &GspCache, dout: &[T]) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    if dout.len() != n * 2 * c {
        return Err(Error::Shape("pooling upstream gradient has the wrong size".into()));
    }
    let mut dx = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let dm = dout[b * 2 * c + ch].f64() / hw as f64;
            let s = cache.std[b * c + ch];
            let m = cache.mean[b * c + ch];
            let ds = if s > 0.0 { dout[b * 2 * c + c + ch].f64() / (hw as f64 * s) } else { 0.0 };
            for i in base..base + hw {
                dx[i] = T::of(dm + ds * (x.data[i].f64() - m));
            }
        }
    }
    Tensor::from_vec(&x.shape, dx)
}
