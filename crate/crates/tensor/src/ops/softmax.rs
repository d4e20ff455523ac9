use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `(outer, len, inner)` factorization of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return shape_err("softmax", format!("axis {axis} for rank {}", x.ndim()));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    let d = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| d[at(k)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for k in 0..len {
                let e = (d[at(k)] - m).exp();
                out[at(k)] = e;
                s = s + e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / s;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Adjoint of softmax given its output `y`.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let mut dx = vec![T::zero(); y.numel()];
    let (yd, gd) = (y.data(), dy.data());
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..len {
                dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), dx)
}

/// Mean over rows of `-sum(target * log_softmax(logits))` for `[n, k]` inputs.
/// Returns the loss and the softmax probabilities.
pub fn soft_cross_entropy<T: Element>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let [n, k] = logits.shape()[..] else {
        return shape_err("cross_entropy", format!("logits must be [n, k], got {:?}", logits.shape()));
    };
    if targets.shape() != logits.shape() {
        return shape_err("cross_entropy", format!("targets {:?} vs logits {:?}", targets.shape(), logits.shape()));
    }
    if n == 0 {
        return shape_err("cross_entropy", "empty batch");
    }
    let probs = softmax(logits, 1)?;
    let mut total = T::zero();
    for r in 0..n {
        let row = &logits.data()[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
        for (j, &z) in row.iter().enumerate() {
            let t = targets.data()[r * k + j];
            if t != T::zero() {
                total = total - t * (z - lse);
            }
        }
    }
    Ok((total / T::from_f64_lossy(n as f64), probs))
}
