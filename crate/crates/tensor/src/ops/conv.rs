//! 2-D cross-correlation via im2col + GEMM, with grouped and depthwise paths.

use crate::element::{gemm, Element, MatView};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams { stride: 1, padding: 0, groups: 1 }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dParams { stride, padding, groups }
    }
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
}

/// Output spatial extent: `(len + 2 * padding - k) / stride + 1`.
pub fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || k == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

pub(crate) fn geometry<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: Conv2dParams,
) -> Result<ConvGeom> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, cin_g, kh, kw) = match w.shape() {
        &[a, b, c, d] => (a, b, c, d),
        s => return shape_err("conv2d", format!("weight must be rank 4, got {s:?}")),
    };
    if p.groups == 0 || cin % p.groups != 0 || cout % p.groups != 0 {
        return config_err(
            "conv2d",
            format!("groups={} must divide c_in={cin} and c_out={cout}", p.groups),
        );
    }
    if p.stride == 0 || kh == 0 || kw == 0 {
        return config_err("conv2d", "stride and kernel size must be >= 1");
    }
    if cin_g * p.groups != cin {
        return shape_err(
            "conv2d",
            format!("weight expects {} input channels, input has {cin}", cin_g * p.groups),
        );
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return shape_err("conv2d", format!("bias {:?} for {cout} outputs", b.shape()));
        }
    }
    let (Some(oh), Some(ow)) =
        (conv_out_len(h, kh, p.stride, p.padding), conv_out_len(wd, kw, p.stride, p.padding))
    else {
        return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"));
    };
    Ok(ConvGeom { n, cin, h, w: wd, cout, kh, kw, oh, ow, stride: p.stride, pad: p.padding, groups: p.groups })
}

/// Unfold channels `[c0, c0 + cin_g)` of sample `b` into `col` (`col_rows x out_plane`).
fn im2col<T: Element>(x: &[T], g: &ConvGeom, b: usize, c0: usize, col: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin_g() {
        let src = &x[((b * g.cin + c0 + ci) * g.h) * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add `col` back into the input gradient (adjoint of `im2col`).
fn col2im<T: Element>(col: &[T], g: &ConvGeom, b: usize, c0: usize, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin_g() {
        let dst = &mut dx[((b * g.cin + c0 + ci) * g.h) * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: Conv2dParams,
) -> Result<Tensor<T>> {
    let g = geometry(x, w, bias, p)?;
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    if g.is_depthwise() {
        depthwise_forward(x.data(), w.data(), &g, &mut out);
    } else {
        let rows = g.col_rows();
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * plane] };
        for b in 0..g.n {
            for grp in 0..g.groups {
                let c0 = grp * g.cin_g();
                let o0 = grp * g.cout_g();
                let wv = MatView::new(o0 * rows, g.cout_g(), rows);
                let cv = MatView::new((b * g.cout + o0) * plane, g.cout_g(), plane);
                if g.is_pointwise() {
                    let xv = MatView::new((b * g.cin + c0) * plane, rows, plane);
                    gemm(w.data(), wv, x.data(), xv, T::zero(), &mut out, cv);
                } else {
                    im2col(x.data(), &g, b, c0, &mut col);
                    gemm(w.data(), wv, &col, MatView::new(0, rows, plane), T::zero(), &mut out, cv);
                }
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.n {
            for (o, &bv) in bias.data().iter().enumerate() {
                out[(b * g.cout + o) * plane..][..plane].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.oh, g.ow], out)
}

fn depthwise_forward<T: Element>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let kk = g.kh * g.kw;
    for b in 0..g.n {
        for c in 0..g.cout {
            let src = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let wk = &w[c * kk..(c + 1) * kk];
            let dst = &mut out[(b * g.cout + c) * g.oh * g.ow..][..g.oh * g.ow];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = T::zero();
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc = acc + wk[ky * g.kw + kx] * src[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    dst[oy * g.ow + ox] = acc;
                }
            }
        }
    }
}

/// Gradients `(dx, dw, db)` given the upstream gradient `dy`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    dy: &Tensor<T>,
    p: Conv2dParams,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = geometry(x, w, None, p)?;
    let plane = g.out_plane();
    if dy.shape() != [g.n, g.cout, g.oh, g.ow] {
        return shape_err("conv2d_backward", format!("upstream {:?}", dy.shape()));
    }
    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.numel()]);
    if g.is_depthwise() {
        depthwise_backward(x.data(), w.data(), dy.data(), &g, dx.as_deref_mut(), dw.as_deref_mut());
    } else {
        let rows = g.col_rows();
        let mut col = vec![T::zero(); rows * plane];
        for b in 0..g.n {
            for grp in 0..g.groups {
                let c0 = grp * g.cin_g();
                let o0 = grp * g.cout_g();
                let dyv = MatView::new((b * g.cout + o0) * plane, g.cout_g(), plane);
                if let Some(dw) = dw.as_mut() {
                    let dwv = MatView::new(o0 * rows, g.cout_g(), rows);
                    if g.is_pointwise() {
                        let xv = MatView::new((b * g.cin + c0) * plane, rows, plane);
                        gemm(dy.data(), dyv, x.data(), xv.t(), T::one(), dw, dwv);
                    } else {
                        im2col(x.data(), &g, b, c0, &mut col);
                        gemm(dy.data(), dyv, &col, MatView::new(0, rows, plane).t(), T::one(), dw, dwv);
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let wv = MatView::new(o0 * rows, g.cout_g(), rows).t();
                    if g.is_pointwise() {
                        let dxv = MatView::new((b * g.cin + c0) * plane, rows, plane);
                        gemm(w.data(), wv, dy.data(), dyv, T::one(), dx, dxv);
                    } else {
                        gemm(w.data(), wv, dy.data(), dyv, T::zero(), &mut col, MatView::new(0, rows, plane));
                        col2im(&col, &g, b, c0, dx);
                    }
                }
            }
        }
    }
    let db = has_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for b in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc = *acc + dy.data()[(b * g.cout + o) * plane..][..plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    Ok((
        dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        db.map(|d| Tensor::new(&[g.cout], d)).transpose()?,
    ))
}

fn depthwise_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let kk = g.kh * g.kw;
    for b in 0..g.n {
        for c in 0..g.cout {
            let xo = (b * g.cin + c) * g.h * g.w;
            let yo = (b * g.cout + c) * g.oh * g.ow;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gy = dy[yo + oy * g.ow + ox];
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xi = xo + iy as usize * g.w + ix as usize;
                            let wi = c * kk + ky * g.kw + kx;
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[wi] = dw[wi] + gy * x[xi];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] = dx[xi] + gy * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}
