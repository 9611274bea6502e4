//! Second-order pooling head: Gram pooling over spatial positions,
//! signed square root, L2 normalization and an affine classifier.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Parameter, Rng, Tensor};

/// Guard added to the L2 norm; also the floor on |x| in the signed-sqrt adjoint.
pub const NORM_EPS: f64 = 1e-12;
pub const SQRT_EPS: f64 = 1e-12;

/// `F = (1/(H·W)) X Xᵀ` where `X` is the `D × HW` merge of the map.
pub fn bilinear_pool(fmap: &Tensor) -> Result<Tensor> {
    let (d, h, w) = fmap.dims3()?;
    let hw = h * w;
    let x = fmap.data();
    let inv = 1.0 / hw as f64;
    let mut gram = vec![0.0; d * d];
    for i in 0..d {
        let xi = &x[i * hw..(i + 1) * hw];
        for j in i..d {
            let xj = &x[j * hw..(j + 1) * hw];
            let s: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
            gram[i * d + j] = s * inv;
            gram[j * d + i] = s * inv;
        }
    }
    Tensor::new(vec![d, d], gram)
}

/// Adjoint of [`bilinear_pool`]: `dX = (1/(HW)) (dF + dFᵀ) X`.
pub fn bilinear_pool_backward(fmap: &Tensor, grad_gram: &Tensor) -> Result<Tensor> {
    let (d, h, w) = fmap.dims3()?;
    grad_gram.expect_shape(&[d, d], "gram gradient")?;
    let hw = h * w;
    let x = fmap.reshape(&[d, hw])?;
    let sym = grad_gram.add(&grad_gram.transpose()?)?.scale(1.0 / hw as f64);
    sym.matmul(&x)?.into_reshaped(&[d, h, w])
}

/// Elementwise `sign(x)·sqrt(|x|)`.
pub fn signed_sqrt(v: &Tensor) -> Result<Tensor> {
    v.ensure_finite("signed_sqrt input")?;
    Ok(v.map(|x| x.signum() * x.abs().sqrt()))
}

/// `dx = dv / (2·sqrt(max(|x|, 1e-12)))`.
pub fn signed_sqrt_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.check_same_shape(grad_out)?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xv, &g)| g / (2.0 * xv.abs().max(SQRT_EPS).sqrt()))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `v / (‖v‖₂ + 1e-12)`; the zero vector maps to itself.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    v.ensure_finite("l2_normalize input")?;
    let denom = v.norm2() + NORM_EPS;
    Ok(v.scale(1.0 / denom))
}

/// Adjoint of [`l2_normalize`]. With `n = ‖v‖`, `s = n + ε`:
/// `dv = dy/s − v (vᵀdy) / (n s²)`, the second term vanishing at `v = 0`.
pub fn l2_normalize_backward(v: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    v.check_same_shape(grad_out)?;
    let n = v.norm2();
    let s = n + NORM_EPS;
    let mut dv = grad_out.scale(1.0 / s);
    if n > 0.0 {
        let proj = v.dot(grad_out)? / (n * s * s);
        for (d, &x) in dv.data_mut().iter_mut().zip(v.data()) {
            *d -= proj * x;
        }
    }
    Ok(dv)
}

/// Gram matrix and its normalized `D²` descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearDescriptor {
    pub gram: Tensor,
    pub rooted: Tensor,
    pub normalized: Tensor,
}

impl BilinearDescriptor {
    pub fn compute(fmap: &Tensor) -> Result<Self> {
        let gram = bilinear_pool(fmap)?;
        let d = gram.shape()[0];
        let rooted = signed_sqrt(&gram.reshape(&[d * d])?)?;
        let normalized = l2_normalize(&rooted)?;
        Ok(Self {
            gram,
            rooted,
            normalized,
        })
    }

    /// Gradient w.r.t. the feature map given the gradient w.r.t. `normalized`.
    pub fn backward(&self, fmap: &Tensor, grad_normalized: &Tensor) -> Result<Tensor> {
        let d_rooted = l2_normalize_backward(&self.rooted, grad_normalized)?;
        let d_gram = signed_sqrt_backward(&self.gram.reshape(&[d_rooted.numel()])?, &d_rooted)?;
        bilinear_pool_backward(fmap, &d_gram.into_reshaped(self.gram.shape())?)
    }

    /// Smallest nonzero |F_ij|; exact zeros stay zero under small perturbations
    /// of non-negative feature maps.
    pub fn sqrt_kink_distance(&self) -> f64 {
        self.gram
            .data()
            .iter()
            .filter(|v| **v != 0.0)
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Fully connected classifier on the descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Head {
    pub fn init(classes: usize, width: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Parameter::init_uniform(&[classes, width], width, rng),
            bias: Parameter::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, descriptor: &Tensor) -> Result<Tensor> {
        head_forward(descriptor, self)
    }

    /// Accumulates weight/bias gradients, returns the descriptor gradient.
    pub fn backward(&mut self, descriptor: &Tensor, grad_logits: &Tensor) -> Result<Tensor> {
        let g = ops::linear_backward(descriptor, &self.weight.value, grad_logits)?;
        self.weight.accumulate(&g.weights)?;
        self.bias.accumulate(&g.bias)?;
        Ok(g.input)
    }
}

pub fn head_forward(descriptor: &Tensor, head: &Head) -> Result<Tensor> {
    if descriptor.numel() != head.width() {
        return Err(Error::shape(format!(
            "descriptor of width {} for head of width {}",
            descriptor.numel(),
            head.width()
        )));
    }
    ops::linear_forward(descriptor, &head.weight.value, &head.bias.value)
}
