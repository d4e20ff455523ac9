//! Batch normalization and per-channel spatial statistics.

use crate::element::Element;
use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

/// Running statistics of a batchnorm layer, updated in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
    pub training: bool,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { eps: 1e-5, momentum: 0.1, training: false }
    }
}

/// Forward result; `x_hat` and `inv_std` are kept for the backward pass.
pub struct BatchNormForward<T> {
    pub y: Tensor<T>,
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn check_channels<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(
            "batchnorm2d",
            format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        );
    }
    if eps <= 0.0 || eps.is_nan() {
        return config_err("batchnorm2d", format!("eps must be > 0, got {eps}"));
    }
    Ok((n, c, h * w))
}

pub fn batchnorm2d_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    cfg: BatchNormConfig,
) -> Result<BatchNormForward<T>> {
    let (n, c, plane) = check_channels(x, gamma, beta, cfg.eps)?;
    if stats.mean.shape() != [c] || stats.var.shape() != [c] {
        return shape_err("batchnorm2d", "running statistics do not match channel count");
    }
    let eps = T::from_f64_lossy(cfg.eps);
    let count = n * plane;
    let (mean, var): (Vec<T>, Vec<T>) = if cfg.training {
        if count == 0 {
            return config_err("batchnorm2d", "empty batch in training mode");
        }
        let cnt = T::from_f64_lossy(count as f64);
        let mom = T::from_f64_lossy(cfg.momentum);
        let mut means = Vec::with_capacity(c);
        let mut vars = Vec::with_capacity(c);
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s = s + x.data()[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
            }
            let m = s / cnt;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &x.data()[(b * c + ch) * plane..][..plane] {
                    sq = sq + (v - m) * (v - m);
                }
            }
            let v = sq / cnt;
            let unbiased = if count > 1 { sq / T::from_f64_lossy((count - 1) as f64) } else { v };
            let rm = &mut stats.mean.data_mut()[ch];
            *rm = (T::one() - mom) * *rm + mom * m;
            let rv = &mut stats.var.data_mut()[ch];
            *rv = (T::one() - mom) * *rv + mom * unbiased;
            means.push(m);
            vars.push(v);
        }
        (means, vars)
    } else {
        (stats.mean.data().to_vec(), stats.var.data().to_vec())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            let (m, is, g, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in o..o + plane {
                let xh = (x.data()[i] - m) * is;
                x_hat[i] = xh;
                y[i] = g * xh + be;
            }
        }
    }
    Ok(BatchNormForward {
        y: Tensor::new(x.shape(), y)?,
        x_hat: Tensor::new(x.shape(), x_hat)?,
        inv_std,
    })
}

/// Gradients `(dx, dgamma, dbeta)`. In eval mode the statistics are constants.
pub fn batchnorm2d_backward<T: Element>(
    dy: &Tensor<T>,
    x_hat: &Tensor<T>,
    gamma: &Tensor<T>,
    inv_std: &[T],
    training: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = dy.dims4()?;
    let plane = h * w;
    let cnt = T::from_f64_lossy((n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            for i in o..o + plane {
                dbeta[ch] = dbeta[ch] + dy.data()[i];
                dgamma[ch] = dgamma[ch] + dy.data()[i] * x_hat.data()[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.numel()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            let k = gamma.data()[ch] * inv_std[ch];
            for i in o..o + plane {
                dx[i] = if training {
                    k * (dy.data()[i] - dbeta[ch] / cnt - x_hat.data()[i] * dgamma[ch] / cnt)
                } else {
                    k * dy.data()[i]
                };
            }
        }
    }
    Ok((Tensor::new(dy.shape(), dx)?, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

/// Spatial mean per `(n, c)`.
pub fn spatial_mean<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    if plane == 0 {
        return config_err("channel_stats", "empty spatial extent");
    }
    let inv = T::one() / T::from_f64_lossy(plane as f64);
    let data = (0..n * c).map(|i| x.data()[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv).collect();
    Tensor::new(&[n, c], data)
}

/// Spatial `sqrt(var + eps)` per `(n, c)` with population variance.
pub fn spatial_std<T: Element>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if eps <= 0.0 || eps.is_nan() {
        return config_err("channel_stats", format!("eps must be > 0, got {eps}"));
    }
    let mean = spatial_mean(x)?;
    let (_, _, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = T::one() / T::from_f64_lossy(plane as f64);
    let eps = T::from_f64_lossy(eps);
    let data = mean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let var = x.data()[i * plane..(i + 1) * plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv;
            (var + eps).sqrt()
        })
        .collect();
    Tensor::new(mean.shape(), data)
}
