//! Forward and backward passes for the trainable building blocks.
//!
//! Every `*_backward` takes the upstream gradient and returns the gradient
//! with respect to the input, accumulating parameter gradients in place.

use super::{axpy, dot, Scalar, Tensor2D};
use crate::error::{Error, Result};

/// `W·x + b`
pub fn linear<T: Scalar>(w: &Tensor2D<T>, b: &[T], x: &[T]) -> Result<Vec<T>> {
    if w.cols() != x.len() {
        return Err(Error::dim("linear", format!("W {}", w), format!("x {}", x.len())));
    }
    if w.rows() != b.len() {
        return Err(Error::dim("linear", format!("W {}", w), format!("b {}", b.len())));
    }
    let mut y = w.matvec(x)?;
    for (yi, &bi) in y.iter_mut().zip(b) {
        *yi += bi;
    }
    Ok(y)
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and returns `dx = Wᵀ dy`.
pub fn linear_backward<T: Scalar>(
    w: &Tensor2D<T>,
    x: &[T],
    dy: &[T],
    grad_w: &mut Tensor2D<T>,
    grad_b: &mut [T],
) -> Vec<T> {
    grad_w.add_outer(dy, x, T::one());
    for (g, &d) in grad_b.iter_mut().zip(dy) {
        *g += d;
    }
    w.matvec_t(dy).expect("shape checked by forward")
}

pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Gradient through softmax given its output `y`: `y ⊙ (dy − ⟨y, dy⟩)`.
pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T]) -> Vec<T> {
    let s = dot(y, dy);
    y.iter().zip(dy).map(|(&yi, &di)| yi * (di - s)).collect()
}

#[inline]
pub fn leaky_relu_scalar<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        slope * x
    }
}

/// Derivative of leaky ReLU; the kink at exactly zero takes the negative-side slope.
#[inline]
pub fn leaky_relu_grad<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        slope
    }
}

pub fn leaky_relu<T: Scalar>(x: &[T], slope: T) -> Vec<T> {
    x.iter().map(|&v| leaky_relu_scalar(v, slope)).collect()
}

pub fn leaky_relu_backward<T: Scalar>(x: &[T], dy: &[T], slope: T) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| d * leaky_relu_grad(v, slope))
        .collect()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Cache for [`layer_norm`]: the normalized input and the inverse standard deviation.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: T,
}

/// Layer normalization with elementwise gain and bias.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    let normalized: Vec<T> = x.iter().map(|&v| (v - mean) * inv_std).collect();
    let y = normalized
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&z, (&g, &b))| z * g + b)
        .collect();
    (y, LayerNormCache { normalized, inv_std })
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &[T],
    dy: &[T],
    grad_gain: &mut [T],
    grad_bias: &mut [T],
) -> Vec<T> {
    let n = T::of(dy.len() as f64);
    let mut dz = Vec::with_capacity(dy.len());
    for i in 0..dy.len() {
        grad_gain[i] += dy[i] * cache.normalized[i];
        grad_bias[i] += dy[i];
        dz.push(dy[i] * gain[i]);
    }
    let mean_dz = dz.iter().copied().sum::<T>() / n;
    let mean_dz_z = dot(&dz, &cache.normalized) / n;
    dz.iter()
        .zip(&cache.normalized)
        .map(|(&d, &z)| cache.inv_std * (d - mean_dz - z * mean_dz_z))
        .collect()
}

/// Elementwise `a + b`.
pub fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn add_in_place<T: Scalar>(a: &mut [T], b: &[T]) {
    axpy(a, T::one(), b);
}
