//! Straightforward loop implementations used as oracles for the lowered
//! kernels. Always f64.

use super::{ConvAttrs, ConvGeometry};

/// Triple-loop `[m,k]·[k,n]`.
pub fn naive_gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for kk in 0..k {
                s += a[i * k + kk] * b[kk * n + j];
            }
            y[i * n + j] = s;
        }
    }
    y
}

/// Direct seven-loop cross-correlation.
pub fn direct_conv(x: &[f64], w: &[f64], bias: Option<&[f64]>, attrs: &ConvAttrs, g: &ConvGeometry) -> Vec<f64> {
    let mut y = vec![0.0; g.n * g.f * g.oh * g.ow];
    for n in 0..g.n {
        for f in 0..g.f {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut s = 0.0;
                    for c in 0..g.c {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * attrs.strides[0] + ki * attrs.dilations[0]) as isize
                                    - attrs.pads[0] as isize;
                                let ix = (ox * attrs.strides[1] + kj * attrs.dilations[1]) as isize
                                    - attrs.pads[1] as isize;
                                if iy < 0 || ix < 0 || iy as usize >= g.h || ix as usize >= g.w {
                                    continue;
                                }
                                let xv = x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = w[((f * g.c + c) * g.kh + ki) * g.kw + kj];
                                s += xv * wv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        s += b[f];
                    }
                    y[((n * g.f + f) * g.oh + oy) * g.ow + ox] = s;
                }
            }
        }
    }
    y
}
