use crate::element::{gemm, Element, MatView};
use crate::error::{shape_err, Result};
use crate::ops::softmax::split_axis;
use crate::tensor::Tensor;

/// Slice `[start, start + len)` along `axis`.
pub fn narrow<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() || start + len > x.shape()[axis] {
        return shape_err("narrow", format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape()));
    }
    let (outer, full, inner) = split_axis(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, data)
}

/// Adjoint of `narrow`: zero-padded embedding of `g` back into `full_shape`.
pub fn narrow_backward<T: Element>(g: &Tensor<T>, full_shape: &[usize], axis: usize, start: usize) -> Result<Tensor<T>> {
    let (outer, full, inner) = split_axis(full_shape, axis);
    let len = g.shape()[axis];
    let mut data = vec![T::zero(); full_shape.iter().product()];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        let src = o * len * inner;
        data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::new(full_shape, data)
}

pub fn concat<T: Element>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let Some(first) = xs.first() else {
        return shape_err("concat", "no inputs");
    };
    if axis >= first.ndim() {
        return shape_err("concat", format!("axis {axis} for rank {}", first.ndim()));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for x in xs {
        let ok = x.ndim() == first.ndim()
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return shape_err("concat", format!("{:?} vs {:?} on axis {axis}", x.shape(), first.shape()));
        }
        shape[axis] += x.shape()[axis];
    }
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for x in xs {
            let chunk = x.shape()[axis] * inner;
            data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&shape, data)
}

/// Batched matrix product of `[b, m, k] x [b, k, n]`, with either operand
/// optionally stored transposed.
pub fn bmm<T: Element>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    let (&[ba, a0, a1], &[bb, b0, b1]) = (a.shape(), b.shape()) else {
        return shape_err("bmm", format!("expected rank-3 operands, got {:?} and {:?}", a.shape(), b.shape()));
    };
    let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
    let (k2, n) = if trans_b { (b1, b0) } else { (b0, b1) };
    if ba != bb || k != k2 {
        return shape_err("bmm", format!("{:?}{} x {:?}{}", a.shape(), if trans_a { "^T" } else { "" }, b.shape(), if trans_b { "^T" } else { "" }));
    }
    let mut out = vec![T::zero(); ba * m * n];
    for i in 0..ba {
        let mut av = MatView::new(i * a0 * a1, a0, a1);
        if trans_a {
            av = av.t();
        }
        let mut bv = MatView::new(i * b0 * b1, b0, b1);
        if trans_b {
            bv = bv.t();
        }
        gemm(a.data(), av, b.data(), bv, T::zero(), &mut out, MatView::new(i * m * n, m, n));
    }
    Tensor::new(&[ba, m, n], out)
}
