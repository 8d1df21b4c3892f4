//! Convolution lowered to matrix multiplication (im2col).
//!
//! Cross-correlation with ONNX `Conv` attribute semantics: no kernel flip,
//! asymmetric pads `[top, left, bottom, right]`, dilations.

use super::gemm::{matmul, transpose};
use super::ConvAttrs;
use crate::par;
use crate::tensor::Element;

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

#[inline]
fn source_index(
    attrs: &ConvAttrs,
    g: &ConvGeometry,
    ki: usize,
    kj: usize,
    oy: usize,
    ox: usize,
) -> Option<(usize, usize)> {
    let iy = (oy * attrs.strides[0] + ki * attrs.dilations[0]) as isize - attrs.pads[0] as isize;
    let ix = (ox * attrs.strides[1] + kj * attrs.dilations[1]) as isize - attrs.pads[1] as isize;
    if iy < 0 || ix < 0 || iy as usize >= g.h || ix as usize >= g.w {
        None
    } else {
        Some((iy as usize, ix as usize))
    }
}

/// Unrolls one image `[C,H,W]` into a `[C·kH·kW, OH·OW]` matrix.
pub fn im2col<T: Element>(x: &[T], attrs: &ConvAttrs, g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let mut col = vec![T::zero(); g.col_rows() * p];
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((iy, ix)) = source_index(attrs, g, ki, kj, oy, ox) {
                            dst[oy * g.ow + ox] = x[(ch * g.h + iy) * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating
/// overlapping contributions in row-major column order.
pub fn col2im<T: Element>(col: &[T], attrs: &ConvAttrs, g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let mut x = vec![T::zero(); g.c * g.h * g.w];
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((iy, ix)) = source_index(attrs, g, ki, kj, oy, ox) {
                            x[(ch * g.h + iy) * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn conv_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    attrs: &ConvAttrs,
    g: &ConvGeometry,
) -> Vec<T> {
    let img = g.c * g.h * g.w;
    let rows = g.col_rows();
    let p = g.positions();
    let work = g.f * rows * p;
    let per_image = par::map_range(g.n, work * g.n, |i| {
        let col = im2col(&x[i * img..(i + 1) * img], attrs, g);
        let mut y = matmul(w, &col, g.f, rows, p);
        if let Some(b) = bias {
            for (f, out) in y.chunks_mut(p).enumerate() {
                for v in out {
                    *v += b[f];
                }
            }
        }
        y
    });
    per_image.concat()
}

/// Returns `(dX, dW, db)`. Per-image weight gradients are summed in image
/// order.
pub fn conv_backward<T: Element>(
    dy: &[T],
    x: &[T],
    w: &[T],
    attrs: &ConvAttrs,
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let img = g.c * g.h * g.w;
    let rows = g.col_rows();
    let p = g.positions();
    let wt = transpose(w, g.f, rows);
    let work = 2 * g.f * rows * p;
    let per_image = par::map_range(g.n, work * g.n, |i| {
        let dy_i = &dy[i * g.f * p..(i + 1) * g.f * p];
        let col = im2col(&x[i * img..(i + 1) * img], attrs, g);
        let col_t = transpose(&col, rows, p);
        let dw = matmul(dy_i, &col_t, g.f, p, rows);
        let dcol = matmul(&wt, dy_i, rows, g.f, p);
        let dx = col2im(&dcol, attrs, g);
        let db: Vec<T> = dy_i.chunks(p).map(|r| r.iter().copied().sum()).collect();
        (dx, dw, db)
    });
    let mut dx = Vec::with_capacity(g.n * img);
    let mut dw = vec![T::zero(); g.f * rows];
    let mut db = vec![T::zero(); g.f];
    for (dx_i, dw_i, db_i) in per_image {
        dx.extend_from_slice(&dx_i);
        for (acc, v) in dw.iter_mut().zip(dw_i) {
            *acc += v;
        }
        for (acc, v) in db.iter_mut().zip(db_i) {
            *acc += v;
        }
    }
    (dx, dw, db)
}
