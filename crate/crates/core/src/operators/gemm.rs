use crate::par;
use crate::tensor::Element;

/// Row-major `[m,k] x [k,n]`. Each output element accumulates its `k`
/// products in ascending `k` order, so the result does not depend on how
/// rows are distributed over threads.
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    par::for_each_chunk_mut(&mut out, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    });
    out
}

pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `Y = A·B (+ bias broadcast over rows)`; the bias is added after the dot
/// product.
pub fn gemm_forward<T: Element>(a: &[T], b: &[T], bias: Option<&[T]>, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut y = matmul(a, b, m, k, n);
    if let Some(c) = bias {
        for row in y.chunks_mut(n) {
            for (v, &cv) in row.iter_mut().zip(c) {
                *v += cv;
            }
        }
    }
    y
}

/// Returns `(dA, dB, dC)` with `dA = dY·Bᵀ`, `dB = Aᵀ·dY`, `dC` the column sums
/// of `dY` taken in row order.
pub fn gemm_backward<T: Element>(
    dy: &[T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let bt = transpose(b, k, n);
    let da = matmul(dy, &bt, m, n, k);
    let at = transpose(a, m, k);
    let db = matmul(&at, dy, k, m, n);
    let mut dc = vec![T::zero(); n];
    for row in dy.chunks(n.max(1)) {
        for (acc, &v) in dc.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (da, db, dc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_is_neutral() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, &eye, 2, 3, 3), a);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = Rng::new(3, 1);
        let a: Vec<f64> = (0..20).map(|_| rng.normal(0.0, 1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.normal(0.0, 1.0)).collect();
        let got = matmul(&a, &b, 5, 4, 3);
        for (g, e) in got.iter().zip(naive(&a, &b, 5, 4, 3)) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let mut rng = Rng::new(4, 0);
        let (m, k, n) = (64, 96, 48);
        let a: Vec<f32> = (0..m * k).map(|_| rng.normal(0.0, 1.0) as f32).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.normal(0.0, 1.0) as f32).collect();
        let par_out = matmul(&a, &b, m, k, n);
        par::set_parallel(false);
        let seq_out = matmul(&a, &b, m, k, n);
        par::set_parallel(true);
        assert_eq!(
            par_out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            seq_out.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
