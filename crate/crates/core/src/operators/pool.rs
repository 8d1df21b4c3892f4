//! Max and median pooling.
//!
//! Padded positions never take part in a window. Max picks the first
//! occurrence of the largest value in scan order. Median of an even-sized
//! window is the mean of the two middle order statistics, and its gradient is
//! split equally between them.

use super::PoolAttrs;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Median,
}

#[derive(Debug, Clone, Copy)]
pub struct PoolGeometry {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Selected source elements of one window with their gradient weights.
enum Pick {
    One(usize),
    Two(usize, usize),
}

fn window<T: Element>(
    plane: &[T],
    attrs: &PoolAttrs,
    g: &PoolGeometry,
    oy: usize,
    ox: usize,
    buf: &mut Vec<(T, usize)>,
) {
    buf.clear();
    for ki in 0..attrs.kernel[0] {
        for kj in 0..attrs.kernel[1] {
            let iy = (oy * attrs.strides[0] + ki) as isize - attrs.pads[0] as isize;
            let ix = (ox * attrs.strides[1] + kj) as isize - attrs.pads[1] as isize;
            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                let idx = iy as usize * g.w + ix as usize;
                buf.push((plane[idx], idx));
            }
        }
    }
}

fn pick<T: Element>(kind: PoolKind, buf: &mut [(T, usize)]) -> Pick {
    match kind {
        PoolKind::Max => {
            let mut best = 0;
            for i in 1..buf.len() {
                if buf[i].0 > buf[best].0 {
                    best = i;
                }
            }
            Pick::One(buf[best].1)
        }
        PoolKind::Median => {
            // Stable sort keeps scan order among equal values.
            buf.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
            let m = buf.len();
            if m % 2 == 1 {
                Pick::One(buf[m / 2].1)
            } else {
                Pick::Two(buf[m / 2 - 1].1, buf[m / 2].1)
            }
        }
    }
}

pub fn pool_forward<T: Element>(x: &[T], kind: PoolKind, attrs: &PoolAttrs, g: &PoolGeometry) -> Vec<T> {
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    let mut buf = Vec::new();
    let half = T::from_f64(0.5);
    for plane in x.chunks(g.h * g.w) {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                window(plane, attrs, g, oy, ox, &mut buf);
                out.push(match pick(kind, &mut buf) {
                    Pick::One(i) => plane[i],
                    Pick::Two(i, j) => (plane[i] + plane[j]) * half,
                });
            }
        }
    }
    out
}

pub fn pool_backward<T: Element>(
    dy: &[T],
    x: &[T],
    kind: PoolKind,
    attrs: &PoolAttrs,
    g: &PoolGeometry,
) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    let mut buf = Vec::new();
    let half = T::from_f64(0.5);
    let hw = g.h * g.w;
    for (p, plane) in x.chunks(hw).enumerate() {
        let dplane = &mut dx[p * hw..(p + 1) * hw];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let grad = dy[(p * g.oh + oy) * g.ow + ox];
                window(plane, attrs, g, oy, ox, &mut buf);
                match pick(kind, &mut buf) {
                    Pick::One(i) => dplane[i] += grad,
                    Pick::Two(i, j) => {
                        dplane[i] += grad * half;
                        dplane[j] += grad * half;
                    }
                }
            }
        }
    }
    dx
}
