//! Slice-level forward and backward kernels behind the tape primitives.

use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if xx < 0 || xx >= g.width as isize {
                            T::zero()
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.width as isize {
                            plane[y as usize * g.width + xx as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let p = g.positions();
    let ck = g.col_rows();
    let in_len = g.in_ch * g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.out_ch * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ck * p]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.out_ch * p..(b + 1) * g.out_ch * p];
        T::gemm(
            g.out_ch, ck, p, w, ck as isize, 1, src, p as isize, 1, T::zero(), ob, p as isize, 1,
        );
    }
    out
}

/// Returns `(dx, dw)`; each is computed only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.positions();
    let ck = g.col_rows();
    let in_len = g.in_ch * g.height * g.width;
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { ck * p }];
    let mut dcols = vec![T::zero(); if want_dx && !g.is_pointwise() { ck * p } else { 0 }];
    for b in 0..g.batch {
        let gb = &grad[b * g.out_ch * p..(b + 1) * g.out_ch * p];
        let xb = &x[b * in_len..(b + 1) * in_len];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            // dw[O, CK] += g[O, P] · colsᵀ[P, CK]
            T::gemm(
                g.out_ch, p, ck, gb, p as isize, 1, src, 1, p as isize, T::one(), dw, ck as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(
                    ck, g.out_ch, p, w, 1, ck as isize, gb, p as isize, 1, T::one(), dxb,
                    p as isize, 1,
                );
            } else {
                // dcols[CK, P] = wᵀ[CK, O] · g[O, P]
                T::gemm(
                    ck, g.out_ch, p, w, 1, ck as isize, gb, p as isize, 1, T::zero(), &mut dcols,
                    p as isize, 1,
                );
                col2im(g, &dcols, dxb);
            }
        }
    }
    (dx, dw)
}

/// Normalizes each `(batch, group)` block; returns `(xhat, inv_std)`.
pub(crate) fn group_norm_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let block = channels / groups * spatial;
    let n: T = lit(block as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(batch * groups);
    for blk in 0..batch * groups {
        let xs = &x[blk * block..(blk + 1) * block];
        let rough = xs.iter().copied().sum::<T>() / n;
        // second pass removes the rounding error of the first
        let mean = rough + xs.iter().map(|&v| v - rough).sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in xhat[blk * block..(blk + 1) * block].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (xhat, inv_std)
}

pub(crate) fn group_norm_backward<T: Scalar>(
    xhat: &[T],
    inv_std: &[T],
    grad: &[T],
    block: usize,
) -> Vec<T> {
    let n: T = lit(block as f64);
    let mut dx = vec![T::zero(); grad.len()];
    for (blk, &is) in inv_std.iter().enumerate() {
        let r = blk * block..(blk + 1) * block;
        let g = &grad[r.clone()];
        let xh = &xhat[r.clone()];
        let mg = g.iter().copied().sum::<T>() / n;
        let mgx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((d, &gi), &xi) in dx[r].iter_mut().zip(g).zip(xh) {
            *d = is * (gi - mg - xi * mgx);
        }
    }
    dx
}

/// Row-wise softmax over the last axis. Masked columns (`keep[j] == false`)
/// receive probability exactly zero.
pub(crate) fn softmax_forward<T: Scalar>(x: &[T], cols: usize, keep: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let live = |j: usize| keep.is_none_or(|k| k[j]);
        let max = (0..cols)
            .filter(|&j| live(j))
            .map(|j| row[j])
            .fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for j in 0..cols {
            if live(j) {
                o[j] = (row[j] - max).exp();
                total += o[j];
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], grad: &[T], cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(cols).zip(grad.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yi * (gi - dot);
        }
    }
    dx
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Permutes a row-major tensor; `out.shape[i] = shape[perm[i]]`.
pub(crate) fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = crate::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
