use crate::tensor::Element;

/// Row-wise softmax over the last axis of length `c`.
pub fn softmax<T: Element>(x: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}

/// `dx = y ⊙ (dy − Σ dy·y)` per row.
pub fn softmax_backward<T: Element>(dy: &[T], y: &[T], c: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(y.len());
    for (drow, yrow) in dy.chunks(c).zip(y.chunks(c)) {
        let dot: T = drow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
        dx.extend(drow.iter().zip(yrow).map(|(&d, &p)| p * (d - dot)));
    }
    dx
}

/// Mean cross-entropy of softmax(logits) against integer labels.
/// Returns `(loss, probs)`; labels must already be validated.
pub fn softmax_xent<T: Element>(logits: &[T], labels: &[usize], c: usize) -> (T, Vec<T>) {
    let n = labels.len();
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = T::zero();
    for (row, &label) in logits.chunks(c).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + s.ln();
        total += lse - row[label];
        probs.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    (total / T::from_f64(n as f64), probs)
}

/// `dlogits = dloss·(probs − onehot)/N`.
pub fn softmax_xent_backward<T: Element>(dloss: T, probs: &[T], labels: &[usize], c: usize) -> Vec<T> {
    let scale = dloss / T::from_f64(labels.len() as f64);
    let mut d = Vec::with_capacity(probs.len());
    for (row, &label) in probs.chunks(c).zip(labels) {
        for (j, &p) in row.iter().enumerate() {
            let target = if j == label { T::one() } else { T::zero() };
            d.push((p - target) * scale);
        }
    }
    d
}
