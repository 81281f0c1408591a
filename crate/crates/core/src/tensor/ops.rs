use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of [`relu`] given its *output*.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_with(grad, |y, g| if y > T::zero() { g } else { T::zero() })
}

/// Row-wise softmax over the last axis of a `[B, K]` tensor.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "softmax expects [B, K], got {:?}",
            logits.shape()
        )));
    }
    let k = logits.dim(1);
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts_unchecked(logits.shape().to_vec(), out))
}

/// `[B, C, 1, 1]` → `[B, C]`.
pub fn global_reshape<T: Real>(x: Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.dim(2) != 1 || x.dim(3) != 1 {
        return Err(Error::shape(format!(
            "classifier output must be [B, C, 1, 1], got {:?}",
            x.shape()
        )));
    }
    let (b, c) = (x.dim(0), x.dim(1));
    x.reshape(vec![b, c])
}

/// Values retained by [`batch_norm_train`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance per channel.
    pub var: Vec<T>,
}

fn bn_dims<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "batch norm expects [B, C, H, W], got {:?}",
            x.shape()
        )));
    }
    let (b, c) = (x.dim(0), x.dim(1));
    if b == 0 {
        return Err(Error::invalid("batch norm on an empty batch"));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "affine parameters of length {}/{} for {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    Ok((b, c, x.dim(2) * x.dim(3)))
}

/// Training-mode batch norm using batch statistics.
pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (b, c, hw) = bn_dims(x, gamma, beta)?;
    let n = T::from_usize(b * hw).unwrap();
    let src = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = T::zero();
        for bi in 0..b {
            for &v in &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                acc += v;
            }
        }
        mean[ci] = acc / n;
        let mut acc = T::zero();
        for bi in 0..b {
            for &v in &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                let d = v - mean[ci];
                acc += d * d;
            }
        }
        var[ci] = acc / n;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); src.len()];
    let mut y = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for j in (bi * c + ci) * hw..(bi * c + ci + 1) * hw {
                let xh = (src[j] - mean[ci]) * inv_std[ci];
                x_hat[j] = xh;
                y[j] = gamma[ci] * xh + beta[ci];
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts_unchecked(shape.clone(), y),
        BatchNormCache {
            x_hat: Tensor::from_parts_unchecked(shape, x_hat),
            inv_std,
            mean,
            var,
        },
    ))
}

/// Eval-mode batch norm using running statistics.
pub fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let (b, c, hw) = bn_dims(x, gamma, beta)?;
    let mut y = x.data().to_vec();
    for bi in 0..b {
        for ci in 0..c {
            let inv = T::one() / (running_var[ci] + eps).sqrt();
            for v in &mut y[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                *v = gamma[ci] * (*v - running_mean[ci]) * inv + beta[ci];
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), y))
}

/// Exact backward of [`batch_norm_train`]: `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Real>(
    grad_y: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if grad_y.shape() != cache.x_hat.shape() {
        return Err(Error::shape(format!(
            "batch norm grad {:?} vs cached {:?}",
            grad_y.shape(),
            cache.x_hat.shape()
        )));
    }
    let (b, c) = (grad_y.dim(0), grad_y.dim(1));
    let hw = grad_y.dim(2) * grad_y.dim(3);
    let n = T::from_usize(b * hw).unwrap();
    let g = grad_y.data();
    let xh = cache.x_hat.data();
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            for j in (bi * c + ci) * hw..(bi * c + ci + 1) * hw {
                grad_beta[ci] += g[j];
                grad_gamma[ci] += g[j] * xh[j];
            }
        }
    }
    let mut grad_x = vec![T::zero(); g.len()];
    for bi in 0..b {
        for ci in 0..c {
            let k = gamma[ci] * cache.inv_std[ci] / n;
            for j in (bi * c + ci) * hw..(bi * c + ci + 1) * hw {
                grad_x[j] = k * (n * g[j] - grad_beta[ci] - xh[j] * grad_gamma[ci]);
            }
        }
    }
    Ok((
        Tensor::from_parts_unchecked(grad_y.shape().to_vec(), grad_x),
        grad_gamma,
        grad_beta,
    ))
}
