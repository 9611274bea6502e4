//! Layer primitives with hand-written adjoints: 3x3 convolution, ReLU,
//! 2x2 max pooling and the affine map.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Conv2dGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

fn conv_dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (d_in, h, w) = input.dims3()?;
    match weights.shape()[..] {
        [d_out, wd_in, 3, 3] if wd_in == d_in => Ok((d_in, d_out, h, w)),
        _ => Err(Error::shape(format!(
            "conv weights {:?} for input {:?}",
            weights.shape(),
            input.shape()
        ))),
    }
}

/// Stride-1 3x3 cross-correlation with zero padding 1; output keeps H x W.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (d_in, d_out, h, w) = conv_dims(input, weights)?;
    bias.expect_shape(&[d_out], "conv bias")?;
    let x = input.data();
    let k = weights.data();
    let mut out = vec![0.0; d_out * h * w];
    for o in 0..d_out {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = bias.data()[o]);
        for i in 0..d_in {
            let src = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let tap = k[((o * d_in + i) * 3 + ky) * 3 + kx];
                    if tap == 0.0 {
                        continue;
                    }
                    // out[y][x] += tap * in[y + ky - 1][x + kx - 1]
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (h + 1 - ky).min(h);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let dst = &mut plane[y * w + x_lo..y * w + x_hi];
                        let s = &src[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += tap * v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d_out, h, w], out)
}

pub fn conv2d_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<Conv2dGrads> {
    let (d_in, d_out, h, w) = conv_dims(input, weights)?;
    grad_out.expect_shape(&[d_out, h, w], "conv grad_out")?;
    let x = input.data();
    let k = weights.data();
    let g = grad_out.data();
    let mut dx = vec![0.0; d_in * h * w];
    let mut dk = vec![0.0; weights.numel()];
    let mut db = vec![0.0; d_out];
    for o in 0..d_out {
        let g_plane = &g[o * h * w..(o + 1) * h * w];
        db[o] = g_plane.iter().sum();
        for i in 0..d_in {
            let src = &x[i * h * w..(i + 1) * h * w];
            let dsrc = &mut dx[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * d_in + i) * 3 + ky) * 3 + kx;
                    let tap = k[widx];
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (h + 1 - ky).min(h);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let go = &g_plane[y * w + x_lo..y * w + x_hi];
                        let lo = sy * w + x_lo + kx - 1;
                        let hi = sy * w + x_hi + kx - 1;
                        let s = &src[lo..hi];
                        let ds = &mut dsrc[lo..hi];
                        for ((&gv, &sv), d) in go.iter().zip(s).zip(ds.iter_mut()) {
                            acc += gv * sv;
                            *d += tap * gv;
                        }
                    }
                    dk[widx] = acc;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::new(vec![d_in, h, w], dx)?,
        weights: Tensor::new(weights.shape().to_vec(), dk)?,
        bias: Tensor::new(vec![d_out], db)?,
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.check_same_shape(grad_out)?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// 2x2 max pooling, stride 2. Also returns, for every output cell, the
/// flat input index that won; ties go to the first maximum in scan order.
pub fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (d, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatialExtent {
            height: h,
            width: w,
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(d * ho * wo);
    let mut argmax = Vec::with_capacity(d * ho * wo);
    for c in 0..d {
        for y in 0..ho {
            for xo in 0..wo {
                let base = c * h * w + 2 * y * w + 2 * xo;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![d, ho, wo], out)?, argmax))
}

pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.numel() != argmax.len() {
        return Err(Error::shape("maxpool grad_out does not match routing table"));
    }
    let mut dx = Tensor::zeros(input_shape);
    let n = dx.numel();
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        if idx >= n {
            return Err(Error::shape("maxpool routing index outside input"));
        }
        d[idx] += g;
    }
    Ok(dx)
}

/// Smallest gap between the winner and runner-up over all pooling windows.
pub fn maxpool_margin(x: &Tensor) -> Result<f64> {
    let (d, h, w) = x.dims3()?;
    let src = x.data();
    let mut margin = f64::INFINITY;
    for c in 0..d {
        for y in (0..h).step_by(2) {
            for xo in (0..w).step_by(2) {
                let base = c * h * w + y * w + xo;
                let mut v = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                v.sort_by(|a, b| b.total_cmp(a));
                margin = margin.min(v[0] - v[1]);
            }
        }
    }
    Ok(margin)
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// `y = W x + b` with `W: [out, in]`, `x: [in]`.
pub fn linear_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out, inp) = weights.dims2()?;
    x.expect_shape(&[inp], "linear input")?;
    bias.expect_shape(&[out], "linear bias")?;
    let wd = weights.data();
    let data = (0..out)
        .map(|o| {
            let row = &wd[o * inp..(o + 1) * inp];
            bias.data()[o] + row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::new(vec![out], data)
}

/// `dW = dy xᵀ`, `dx = Wᵀ dy`, `db = dy`.
pub fn linear_backward(x: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (out, inp) = weights.dims2()?;
    x.expect_shape(&[inp], "linear input")?;
    grad_out.expect_shape(&[out], "linear grad_out")?;
    let wd = weights.data();
    let mut dw = vec![0.0; out * inp];
    let mut dx = vec![0.0; inp];
    for (o, &g) in grad_out.data().iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &wd[o * inp..(o + 1) * inp];
        let drow = &mut dw[o * inp..(o + 1) * inp];
        for ((d, &xv), (dxv, &wv)) in drow.iter_mut().zip(x.data()).zip(dx.iter_mut().zip(row)) {
            *d = g * xv;
            *dxv += g * wv;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(vec![inp], dx)?,
        weights: Tensor::new(vec![out, inp], dw)?,
        bias: grad_out.clone(),
    })
}
